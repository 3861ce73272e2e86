"""Self-checks of the surgery invariants, runnable on any plain checkpoint.

Each check returns a :class:`CheckResult`; the CLI prints them as
``CHECK <name> PASS|FAIL <metric>`` lines.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import Archive
from .hier import (STRIDES, GlobalPoolDownsampler, HierModel, MaxPoolDownsampler, embed, forward_hier,
                   hier_block, map_to_tokens, overlap_patch_embed, reuse_audit, run_stages, surgery,
                   tokens_to_map, window_attention)
from .plain import PlainVitModel, global_attention, patch_embed_plain, resize_pos_grid, split_pos_embed
from .reparam import BranchedDownsampler, merge
from .tensor import avg_pool2d

SUITES = ("reuse", "window_global", "locality", "stride16", "merge", "pyramid", "neutrality", "posembed")


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    metric: str

    def line(self) -> str:
        return f"CHECK {self.name} {'PASS' if self.passed else 'FAIL'} {self.metric}"


def check_reuse(source: Archive, model: HierModel, inject_fault: bool = False) -> CheckResult:
    if inject_fault:
        key = "blocks.0.attn.qkv.bias"
        model.reused[key].view(np.uint8)[0] ^= 0x01
    audit = reuse_audit(source, model)
    detail = audit.summary()
    if not audit.passed:
        detail += f"; mismatched={audit.mismatched} missing={audit.missing} " \
                  f"unexpected_new={audit.unexpected_new} missing_new={audit.missing_new}"
    return CheckResult("reuse_audit", audit.passed, detail)


def check_window_global(model: HierModel, seeds: int = 10, tol: float = 1e-5, side: int = 7) -> CheckResult:
    """Window attention with one window covering the map equals global attention."""
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        w = model.blocks[seed % len(model.blocks)]
        x = rng.standard_normal((model.dim, side, side), dtype=np.float32)
        zero = np.zeros((model.heads, (2 * side - 1) ** 2), np.float32)
        win = window_attention(x, w, model.heads, side, zero)
        glob = tokens_to_map(global_attention(map_to_tokens(x), w, model.heads), side, side)
        worst = max(worst, float(np.abs(win - glob).max()))
    return CheckResult("window_global", worst < tol, f"max_abs_diff={worst:.3e} tol={tol:g} seeds={seeds}")


def check_locality(model: HierModel, seed: int = 0, ws: int = 7, side: int = 14) -> CheckResult:
    """Perturbing tokens outside a window leaves that window's outputs untouched."""
    rng = np.random.default_rng(seed)
    w = model.blocks[0]
    table = rng.standard_normal((model.heads, (2 * ws - 1) ** 2), dtype=np.float32)
    x = rng.standard_normal((model.dim, side, side), dtype=np.float32)
    base = window_attention(x, w, model.heads, ws, table)
    worst = 0.0
    for _ in range(8):
        y = x.copy()
        qy, qx = rng.integers(0, side, size=2)
        inside = np.zeros((side, side), bool)
        wy, wx = qy // ws * ws, qx // ws * ws
        inside[wy:wy + ws, wx:wx + ws] = True
        noise = rng.standard_normal(y.shape, dtype=np.float32)
        y[:, ~inside] += noise[:, ~inside]
        out = window_attention(y, w, model.heads, ws, table)
        worst = max(worst, float(np.abs(out[:, inside] - base[:, inside]).max()))
    return CheckResult("locality", worst == 0.0, f"max_abs_change={worst:.3e} (must be exactly 0)")


def check_stride16(source: Archive, model: HierModel, seeds: int = 10, tol: float = 1e-6) -> CheckResult:
    """Overlap embed at stride=patch, pad 0 reproduces the plain patch embedding."""
    plain = PlainVitModel(source, heads=model.heads)
    p = model.schema.patch
    worst = 0.0
    for seed in range(seeds):
        img = np.random.default_rng(seed).standard_normal((3, model.schema.img, model.schema.img), dtype=np.float32)
        ours = overlap_patch_embed(img, model, stride=p, pad=0)
        ref = patch_embed_plain(img, plain)
        worst = max(worst, float(np.abs(map_to_tokens(ours) - ref).max()))
    return CheckResult("stride16_degeneracy", worst < tol,
                       f"max_abs_diff={worst:.3e} tol={tol:g} stride={p} seeds={seeds}")


def check_merge(model: HierModel, trials: int = 50, tol: float = 1e-5, seed: int = 0) -> CheckResult:
    """Branched and merged downsamplers agree; zero conv reduces to average pooling."""
    rng = np.random.default_rng(seed)
    c = model.dim
    scale = np.float32((9 * c) ** -0.5)
    branched = BranchedDownsampler(rng.standard_normal((c, c, 3, 3), dtype=np.float32) * scale,
                                   0.1 * rng.standard_normal(c, dtype=np.float32))
    merged = merge(branched)
    zero = merge(BranchedDownsampler.zeros(c))
    worst = worst_zero = 0.0
    for _ in range(trials):
        x = rng.standard_normal((c, 14, 14), dtype=np.float32)
        worst = max(worst, float(np.abs(branched(x) - merged(x)).max()))
        worst_zero = max(worst_zero, float(np.abs(zero(x) - avg_pool2d(x, 3, 2, 1)).max()))
    ok = worst < tol and worst_zero < 1e-6
    return CheckResult("merge_equivalence", ok,
                       f"max_abs_diff={worst:.3e} zero_conv_vs_pool={worst_zero:.3e} trials={trials} C={c}")


def check_pyramid(model: HierModel, size: int | None = None) -> CheckResult:
    size = size or max(STRIDES[-1], model.schema.img // STRIDES[-1] * STRIDES[-1])
    img = np.random.default_rng(0).standard_normal((3, size, size), dtype=np.float32)
    pyramid = forward_hier(img, model, head="pyramid")
    expected = [(model.dim, size // s, size // s) for s in STRIDES]
    got = pyramid.shapes()
    return CheckResult("pyramid_shapes", got == expected, f"input={size} shapes={got}")


def reference_stages(img: np.ndarray, model: HierModel) -> list[np.ndarray]:
    """Stage outputs with pure average-pool downsampling and bias-free windows.

    Built from the primitives directly, ignoring the model's new parameters.
    """
    x = embed(img, model)
    outputs, block = [], 0
    for stage, n_blocks in enumerate(model.config.stage_layout):
        if stage:
            ds = model.downsamplers[stage - 1]
            if isinstance(ds, (MaxPoolDownsampler, GlobalPoolDownsampler)):
                x = ds(x)
            else:
                x = avg_pool2d(x, 3, 2, 1)
        for _ in range(n_blocks):
            x = hier_block(x, model, block, use_rel_bias=False)
            block += 1
        outputs.append(x)
    return outputs


def check_neutrality(model: HierModel, seed: int = 0) -> CheckResult:
    size = max(STRIDES[-1], model.schema.img // STRIDES[-1] * STRIDES[-1])
    img = np.random.default_rng(seed).standard_normal((3, size, size), dtype=np.float32)
    ours = run_stages(img, model)
    ref = reference_stages(img, model)
    equal = [bool(np.array_equal(a, b)) for a, b in zip(ours, ref)]
    worst = max(float(np.abs(a - b).max()) for a, b in zip(ours, ref))
    return CheckResult("neutrality", all(equal), f"bit_exact_stages={equal} max_abs_diff={worst:.3e}")


def check_posembed(model: HierModel, tol_identity: float = 1e-6, tol_rms: float = 1e-2) -> CheckResult:
    _, grid = split_pos_embed(model.reused["pos_embed"], model.schema.has_cls_token)
    g = grid.shape[0]
    ident = float(np.abs(resize_pos_grid(grid, g, g) - grid).max())
    back = resize_pos_grid(resize_pos_grid(grid, 4 * g, 4 * g), g, g)
    rms = float(np.sqrt(np.mean((back - grid) ** 2)))
    return CheckResult("posembed", ident < tol_identity and rms < tol_rms,
                       f"identity_max_abs={ident:.3e} roundtrip_{g}->{4 * g}->{g}_rms={rms:.3e}")


def run_suites(source: Archive, suites, *, seed: int = 0, inject_fault: bool = False,
               heads: int | None = None) -> list[CheckResult]:
    """Surger ``source`` with default settings and run the selected suites."""
    suites = list(suites)
    if not suites:
        raise ValueError("no verification suites selected")
    unknown = [s for s in suites if s not in SUITES]
    if unknown:
        raise ValueError(f"unknown suites {unknown}; choose from {SUITES}")
    model = surgery(source, heads=heads)
    results = []
    for name in SUITES:
        if name not in suites:
            continue
        if name == "reuse":
            results.append(check_reuse(source, model, inject_fault))
        elif name == "window_global":
            results.append(check_window_global(model))
        elif name == "locality":
            results.append(check_locality(model, seed))
        elif name == "stride16":
            results.append(check_stride16(source, model))
        elif name == "merge":
            results.append(check_merge(model, seed=seed))
        elif name == "pyramid":
            results.append(check_pyramid(model))
        elif name == "neutrality":
            results.append(check_neutrality(model, seed))
        elif name == "posembed":
            results.append(check_posembed(model))
    return results
