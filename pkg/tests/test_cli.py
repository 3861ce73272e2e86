import numpy as np
import pytest

from vitreforge.checkpoint import Archive, load_archive, save_archive
from vitreforge.cli import main
from vitreforge.image import encode_ppm
from vitreforge.synthetic import make_nano


@pytest.fixture
def plain_path(tmp_path):
    path = tmp_path / "plain.nta"
    save_archive(make_nano(n_classes=5), path)
    return path


@pytest.fixture
def hier_path(tmp_path, plain_path):
    path = tmp_path / "hier.nta"
    assert main(["surgery", "--in", str(plain_path), "--out", str(path)]) == 0
    return path


def test_surgery_reports_taps(plain_path, tmp_path, capsys):
    out = tmp_path / "h.nta"
    assert main(["surgery", "--in", str(plain_path), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "taps {1,2,3,4}" in text and "PASS" in text
    assert load_archive(out).metadata["format"] == "hier"


def test_surgery_custom_layout(tmp_path, capsys):
    from vitreforge.synthetic import make_plain_vit
    src = tmp_path / "d12.nta"
    save_archive(make_plain_vit(depth=12, dim=16, heads=2, patch=4, img=32), src)
    assert main(["surgery", "--in", str(src), "--out", str(tmp_path / "o.nta"), "--stage-layout", "3,3,3,3"]) == 0
    assert "taps {3,6,9,12}" in capsys.readouterr().out
    assert main(["surgery", "--in", str(src), "--out", str(tmp_path / "o.nta"), "--stage-layout", "2,2,2,2"]) == 3


def test_config_file(plain_path, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# nano\nfinal-stage-pool = max2\n")
    out = tmp_path / "h.nta"
    assert main(["surgery", "--in", str(plain_path), "--out", str(out), "--config", str(cfg)]) == 0
    assert not any(k.startswith("hier.downsample.2") for k in load_archive(out))
    cfg.write_text("stage_width=3\n")
    assert main(["surgery", "--in", str(plain_path), "--out", str(out), "--config", str(cfg)]) == 3
    assert main(["surgery", "--in", str(plain_path), "--out", str(out), "--config", str(tmp_path / "nope")]) == 2


def test_missing_input(tmp_path):
    assert main(["surgery", "--in", str(tmp_path / "missing.nta"), "--out", str(tmp_path / "o.nta")]) == 2


def test_corrupt_input(tmp_path):
    bad = tmp_path / "bad.nta"
    bad.write_bytes(b"NTA1 but not really")
    assert main(["surgery", "--in", str(bad), "--out", str(tmp_path / "o.nta")]) == 2


def test_infer_pyramid(hier_path, tmp_path, capsys):
    img = tmp_path / "x.ppm"
    img.write_bytes(encode_ppm(np.random.default_rng(0).random((3, 64, 64))))
    out = tmp_path / "feat.nta"
    assert main(["infer", "--model", str(hier_path), "--image", str(img), "--out", str(out)]) == 0
    feats = load_archive(out)
    assert sorted(feats) == ["c16", "c32", "c4", "c8"]
    assert feats["c4"].shape == (8, 16, 16) and feats["c32"].shape == (8, 2, 2)
    assert "c8\t8,8,8" in capsys.readouterr().out


def test_infer_pyramid_needs_out(hier_path, tmp_path):
    img = tmp_path / "x.ppm"
    img.write_bytes(encode_ppm(np.zeros((3, 32, 32))))
    assert main(["infer", "--model", str(hier_path), "--image", str(img)]) == 3


def test_infer_raw_tensor_skips_normalization(hier_path, tmp_path):
    from vitreforge.hier import forward_hier, from_archive
    x = np.random.default_rng(1).standard_normal((3, 32, 32)).astype(np.float32)
    raw = tmp_path / "img.nta"
    save_archive(Archive({"image": x}), raw)
    out = tmp_path / "f.nta"
    assert main(["infer", "--model", str(hier_path), "--image", str(raw), "--out", str(out)]) == 0
    expected = forward_hier(x, from_archive(load_archive(hier_path))).c4
    np.testing.assert_array_equal(load_archive(out)["c4"], expected)
    save_archive(Archive({"pixels": x}), raw)
    assert main(["infer", "--model", str(hier_path), "--image", str(raw), "--out", str(out)]) == 2


def test_infer_classification(plain_path, tmp_path, capsys):
    h = tmp_path / "cls.nta"
    assert main(["surgery", "--in", str(plain_path), "--out", str(h), "--head", "classification"]) == 0
    img = tmp_path / "x.ppm"
    img.write_bytes(encode_ppm(np.full((3, 64, 64), 0.5)))
    capsys.readouterr()
    assert main(["infer", "--model", str(h), "--image", str(img), "--top-k", "3"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3
    probs = [float(line.split("\t")[2]) for line in lines]
    assert probs == sorted(probs, reverse=True)


def test_infer_indivisible(hier_path, tmp_path, capsys):
    img = tmp_path / "odd.ppm"
    img.write_bytes(encode_ppm(np.zeros((3, 65, 65))))
    assert main(["infer", "--model", str(hier_path), "--image", str(img), "--out", str(tmp_path / "o")]) == 2
    assert "32" in capsys.readouterr().err


def test_infer_bad_mean(hier_path, tmp_path):
    img = tmp_path / "x.ppm"
    img.write_bytes(encode_ppm(np.zeros((3, 32, 32))))
    assert main(["infer", "--model", str(hier_path), "--image", str(img), "--mean", "1,2",
                 "--out", str(tmp_path / "o")]) == 3


def test_verify_all(capsys):
    assert main(["verify", "--synthetic", "nano", "--all"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 8 and "SUMMARY 8/8 passed" in out


def test_verify_selected_suite(plain_path, capsys):
    assert main(["verify", "--model", str(plain_path), "--locality", "--merge"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split()[1] for line in lines[:2]] == ["locality", "merge_equivalence"]


def test_verify_inject_fault(capsys):
    assert main(["verify", "--synthetic", "nano", "--reuse", "--inject-fault"]) == 1
    assert "CHECK reuse_audit FAIL" in capsys.readouterr().out


def test_verify_no_suites():
    assert main(["verify", "--synthetic", "nano"]) == 3


def test_merge_command(hier_path, tmp_path, capsys):
    merged = tmp_path / "m.nta"
    assert main(["merge", "--in", str(hier_path), "--out", str(merged)]) == 0
    assert "merged 3 downsamplers" in capsys.readouterr().out
    archive = load_archive(merged)
    assert archive.metadata["merged"] == "true"
    assert any(".fused." in k for k in archive)
    assert main(["merge", "--in", str(merged), "--out", str(tmp_path / "again.nta")]) == 3


def test_merge_rejects_plain(plain_path, tmp_path):
    assert main(["merge", "--in", str(plain_path), "--out", str(tmp_path / "x.nta")]) == 3


def test_bench(hier_path, capsys):
    assert main(["bench", "--model", str(hier_path), "--input-size", "64", "--repeats", "2"]) == 0
    out = capsys.readouterr().out
    assert "measured 2 runs" in out and out.count("\n") >= 7
    assert main(["bench", "--synthetic", "nano", "--input-size", "48", "--repeats", "0"]) == 2


def test_argparse_errors_exit_3():
    with pytest.raises(SystemExit) as exc:
        main(["surgery", "--in", "x"])
    assert exc.value.code == 3
    with pytest.raises(SystemExit) as exc:
        main(["verify", "--synthetic", "nano", "--model", "x", "--all"])
    assert exc.value.code == 3
