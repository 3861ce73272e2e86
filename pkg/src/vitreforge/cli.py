"""``vitreforge`` command line: surgery, infer, verify, merge, bench.

Exit codes: 0 success, 1 verification failure, 2 I/O or format error,
3 configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Archive, load_archive, save_archive, validate_plain_vit
from .errors import ConfigError, DimensionError, FormatError, SchemaError
from .flops import analytic_flops, time_forward
from .hier import (HierVitConfig, from_archive, forward_hier, merge_model, parse_key_values, reuse_audit,
                   surgery, to_archive)
from .image import IMAGENET_MEAN, IMAGENET_STD, decode_ppm, normalize
from .synthetic import make_nano, make_vit_b
from .tensor import softmax
from .verify import SUITES, run_suites

log = logging.getLogger("vitreforge")

EXIT_OK, EXIT_VERIFY, EXIT_IO, EXIT_CONFIG = 0, 1, 2, 3
SYNTHETIC = {"nano": make_nano, "vit-b": make_vit_b}
RUN_KEYS = ("mean", "std", "seed")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _floats3(text: str) -> tuple[float, float, float]:
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"expected 3 comma-separated floats, got {text!r}") from None
    if len(values) != 3:
        raise ConfigError(f"expected 3 comma-separated floats, got {text!r}")
    return values


def _file_values(args) -> dict[str, str]:
    if not getattr(args, "config", None):
        return {}
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read config file: {exc}") from None
    return {k.replace("-", "_"): v for k, v in parse_key_values(text).items()}


def _config_overrides(args) -> dict[str, str]:
    """Config-file values overlaid with explicit flags (flags win)."""
    values = {k: v for k, v in _file_values(args).items() if k not in RUN_KEYS}
    flags = {
        "stage_layout": args.stage_layout, "window_size": args.window_size,
        "window_plan": args.window_plan, "attention_plan": args.attention_plan,
        "head": args.head, "final_stage_pool": args.final_pool,
    }
    values.update({k: str(v) for k, v in flags.items() if v is not None})
    if args.no_tap_norm:
        values["tap_norm"] = "false"
    return values


def _run_value(args, key: str, default):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    return _file_values(args).get(key, default)


def _load_plain(args) -> Archive:
    if getattr(args, "synthetic", None):
        return SYNTHETIC[args.synthetic](seed=args.seed)
    if not args.model:
        raise ConfigError("pass --model PATH or --synthetic NAME")
    return load_archive(args.model)


# --- commands ----------------------------------------------------------------------

def cmd_surgery(args) -> int:
    plain = load_archive(args.input)
    schema = validate_plain_vit(plain, args.heads)
    cfg = HierVitConfig.for_schema(schema).with_overrides(_config_overrides(args))
    log.debug("surgery config: %s", cfg.to_text().replace("\n", "; "))
    model = surgery(plain, cfg, heads=args.heads)
    audit = reuse_audit(plain, model)
    save_archive(to_archive(model), args.output)
    taps = ",".join(map(str, cfg.taps))
    print(f"surgery: depth {schema.depth}, dim {schema.dim}, heads {schema.heads}; "
          f"stage layout {','.join(map(str, cfg.stage_layout))} -> taps {{{taps}}}")
    print(f"audit {'PASS' if audit.passed else 'FAIL'}: {audit.summary()}")
    print(f"wrote {args.output}")
    return EXIT_OK if audit.passed else EXIT_VERIFY


def _read_image(args) -> np.ndarray:
    path = Path(args.image)
    if path.suffix == ".nta":
        archive = load_archive(path)
        if "image" not in archive:
            raise FormatError(f"{path}: raw-tensor input needs a key named 'image'")
        img = np.asarray(archive["image"], np.float32)
        if img.ndim != 3 or img.shape[0] != 3:
            raise DimensionError(f"image tensor must be [3,H,W], got {img.shape}")
        return img
    mean = _floats3(str(_run_value(args, "mean", ",".join(map(str, IMAGENET_MEAN)))))
    std = _floats3(str(_run_value(args, "std", ",".join(map(str, IMAGENET_STD)))))
    return normalize(decode_ppm(path), mean, std)


def cmd_infer(args) -> int:
    model = from_archive(load_archive(args.model))
    img = _read_image(args)
    if img.shape[1] % 32 or img.shape[2] % 32:
        raise DimensionError(f"image is {img.shape[2]}x{img.shape[1]}; both sides must be divisible by 32")
    head = args.head or model.config.head
    log.debug("infer: input %s, head %s", img.shape, head)
    result = forward_hier(img, model, head=head)
    if head == "classification":
        probs = softmax(result)
        order = np.argsort(-probs, kind="stable")[:args.top_k]
        for rank, idx in enumerate(order, start=1):
            print(f"{rank}\t{int(idx)}\t{float(probs[idx]):.6f}\t{float(result[idx]):.6f}")
        return EXIT_OK
    if not args.output:
        raise ConfigError("pyramid inference needs --out PATH")
    out = Archive(result.levels(), {"strides": "4,8,16,32", "input": f"{img.shape[1]}x{img.shape[2]}"})
    save_archive(out, args.output)
    for name, tensor in result.levels().items():
        print(f"{name}\t{','.join(map(str, tensor.shape))}")
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_verify(args) -> int:
    file_seed = _file_values(args).get("seed")
    if file_seed is not None and args.seed == 0:
        args.seed = int(file_seed)
    if args.all:
        suites = list(SUITES)
    else:
        suites = [name for name in SUITES if getattr(args, f"suite_{name}")]
    if not suites:
        raise ConfigError("no verification suites selected (use --all or individual suite flags)")
    source = _load_plain(args)
    results = run_suites(source, suites, seed=args.seed, inject_fault=args.inject_fault, heads=args.heads)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"SUMMARY {len(results) - len(failed)}/{len(results)} passed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_merge(args) -> int:
    archive = load_archive(args.input)
    if archive.metadata.get("merged") == "true":
        raise ConfigError(f"{args.input} is already merged")
    model = merge_model(from_archive(archive))
    save_archive(to_archive(model), args.output)
    n = sum(1 for k in model.new_parameters() if k.endswith("fused.weight"))
    print(f"merged {n} downsamplers; wrote {args.output}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.synthetic:
        source = SYNTHETIC[args.synthetic](seed=args.seed)
        model = surgery(source)
    else:
        archive = load_archive(args.model)
        model = from_archive(archive) if archive.metadata.get("format") == "hier" else surgery(archive)
    size = args.input_size or model.schema.img
    if size % 32:
        raise DimensionError(f"input size {size} must be divisible by 32")
    report = analytic_flops(model.schema, model.config, size, size)
    print(f"analytic FLOPs at {size}x{size} (dim {model.dim}, layout {list(model.config.stage_layout)})")
    print("stage\tmap\tblocks\tentry\tprojections\tscore_aggregate\tmlp\ttotal")
    for s in report.stages:
        print(f"{s.stage}\t{s.height}x{s.width}\t{s.blocks}\t{s.entry}\t{s.projections}\t"
              f"{s.score_aggregate}\t{s.mlp}\t{s.total}")
    print(f"total\t{report.total}\t({report.total / 1e9:.3f} GFLOPs)")
    if args.repeats:
        img = np.random.default_rng(args.seed).standard_normal((3, size, size), dtype=np.float32)
        tokens = (size // 4) ** 2
        head = "classification" if model.config.final_pool == "gap" else "pyramid"
        timing = time_forward(lambda: forward_hier(img, model, head=head), args.repeats, tokens)
        print(f"measured {timing.repeats} runs: total {timing.total:.4f} s, "
              f"mean {timing.total / timing.repeats:.4f} s, {timing.tokens_per_second:.1f} tokens/s")
    return EXIT_OK


# --- parser ------------------------------------------------------------------------

def _add_config_flags(p) -> None:
    p.add_argument("--stage-layout", help="four comma-separated block counts, e.g. 2,2,6,2")
    p.add_argument("--window-size", type=int)
    p.add_argument("--window-plan", help="per-block attention, e.g. w7,w7,g,... (overrides --attention-plan)")
    p.add_argument("--attention-plan", choices=("default", "detection"))
    p.add_argument("--head", choices=("pyramid", "classification"))
    p.add_argument("--final-pool", choices=("learned", "max2", "gap"))
    p.add_argument("--no-tap-norm", action="store_true", help="emit pyramid taps without the final norm")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vitreforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value file with config overrides")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--heads", type=int, help="attention heads (default: archive metadata or dim/64)")

    p = sub.add_parser("surgery", parents=[common], help="plain ViT archive -> hierarchical archive")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_surgery)

    p = sub.add_parser("infer", parents=[common], help="run a hierarchical archive on an image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True, help="P6 .ppm, or .nta with an 'image' tensor [3,H,W]")
    p.add_argument("--head", choices=("pyramid", "classification"))
    p.add_argument("--out", dest="output")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--mean", help="3 comma-separated floats (default ImageNet convention)")
    p.add_argument("--std", help="3 comma-separated floats (default ImageNet convention)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("verify", parents=[common], help="run invariant suites")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--model", help="plain ViT archive to surger and check")
    src.add_argument("--synthetic", choices=sorted(SYNTHETIC))
    p.add_argument("--all", action="store_true")
    for name in SUITES:
        p.add_argument(f"--{name.replace('_', '-')}", dest=f"suite_{name}", action="store_true")
    p.add_argument("--inject-fault", action="store_true", help="flip one bias byte before the reuse audit")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("merge", parents=[common], help="fold downsampler branches into single convs")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("bench", parents=[common], help="analytic FLOPs and measured latency")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", help="plain or hierarchical archive")
    src.add_argument("--synthetic", choices=sorted(SYNTHETIC))
    p.add_argument("--input-size", type=int)
    p.add_argument("--repeats", type=int, default=1, help="timed forward passes (0 = analytic only)")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, DimensionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
