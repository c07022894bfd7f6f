import csv
import json

import numpy as np
import pytest
import torch

from bolt.cli import main
from bolt.config import parse_config
from bolt.data import generate_synthetic
from bolt.framework import build_online, image_patches

TINY = """
[data]
H = 8
W = 8
C = 1
per_class = 10
noise_std = 0.1
jitter = 2

[model]
P = 4
D = 16
depth = 1
heads = 2
proj_hidden = 16
proj_dim = 8

[perturb]
M = 2

[train]
steps = 10
batch_size = 8
checkpoint_every = 5

[eval]
probe_epochs = 20
finetune_epochs = 1
seeds = [0]
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return p


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_data(tiny, tmp_path):
    assert run("gen-data", "--config", tiny, "--out", tmp_path / "d") == 0
    rows = list(csv.DictReader((tmp_path / "d" / "manifest.csv").open()))
    assert len(rows) == 30
    assert len(list((tmp_path / "d" / "images").iterdir())) == 3


def test_pretrain_writes_checkpoints_and_metrics(tiny, tmp_path):
    out, metrics = tmp_path / "ck", tmp_path / "m.csv"
    assert run("pretrain", "--config", tiny, "--out", out, "--metrics", metrics) == 0
    lines = metrics.read_text().splitlines()
    assert lines[0] == "step,loss_total,loss_bolt,loss_diff,diff_acc,repr_std"
    assert len(lines) == 11
    assert sorted(p.name for p in out.iterdir()) == ["pretrain.bolt", "step000005.bolt", "step000010.bolt"]

    again = tmp_path / "m2.csv"
    assert run("pretrain", "--config", tiny, "--out", tmp_path / "ck2", "--metrics", again) == 0
    assert again.read_bytes() == metrics.read_bytes()


def test_pretrain_alpha_zero_ablation(tiny, tmp_path):
    metrics = tmp_path / "m.csv"
    assert run("pretrain", "--config", tiny, "--alpha", 0, "--steps", 3, "--out", tmp_path / "ck", "--metrics", metrics) == 0
    rows = list(csv.DictReader(metrics.open()))
    assert len(rows) == 3
    for r in rows:
        assert float(r["loss_diff"]) > 0
        assert float(r["loss_total"]) == float(r["loss_bolt"])


def test_pretrain_non_finite_exit_code(tiny, tmp_path, capsys):
    code = run("pretrain", "--config", tiny, "--set", "model.pixel_std=1e-40", "--out", tmp_path / "ck", "--metrics", tmp_path / "m.csv")
    assert code == 2
    dump = json.loads((tmp_path / "ck" / "failure.json").read_text())
    assert "non-finite" in dump["error"] and dump["report"]["step"] == 1
    assert "error" in capsys.readouterr().err


def test_usage_errors(tiny, tmp_path, capsys):
    assert run("probe", "--config", tiny, "--set", "model.P=3") == 1
    assert "P must divide" in capsys.readouterr().err
    assert run("probe", "--config", tiny, "--init", "bolt") == 1
    assert run("nonsense") == 1
    assert run("pretrain", "--config", tiny, "--set", "trian.lr=1") == 1


def test_probe_scratch_needs_no_checkpoint(tiny, tmp_path, capsys):
    res = tmp_path / "r.csv"
    assert run("probe", "--config", tiny, "--results", res) == 0
    row = next(csv.DictReader(res.open()))
    assert row["strategy"] == "scratch"
    assert f"ACC {float(row['acc']):.4f}" in capsys.readouterr().out


def test_probe_with_mismatched_checkpoint(tiny, tmp_path, capsys):
    assert run("pretrain", "--config", tiny, "--steps", 1, "--out", tmp_path / "ck", "--metrics", tmp_path / "m.csv") == 0
    code = run("probe", "--config", tiny, "--set", "model.D=32", "--init", "bolt", "--checkpoint", tmp_path / "ck" / "pretrain.bolt")
    assert code == 1
    assert "embed" in capsys.readouterr().err


def test_finetune_then_eval(tiny, tmp_path, capsys):
    assert run("pretrain", "--config", tiny, "--steps", 2, "--out", tmp_path / "ck", "--metrics", tmp_path / "m.csv") == 0
    model = tmp_path / "clf.bolt"
    args = ("finetune", "--config", tiny, "--init", "bolt", "--checkpoint", tmp_path / "ck" / "pretrain.bolt", "--out", model)
    assert run(*args) == 0
    capsys.readouterr()
    res = tmp_path / "r.csv"
    assert run("eval", "--config", tiny, "--model", model, "--results", res) == 0
    out = capsys.readouterr().out
    row = next(csv.DictReader(res.open()))
    assert out.strip() == f"ACC {float(row['acc']):.4f} F1 {float(row['f1_macro']):.4f}"


def test_compare_grid_columns(tiny, tmp_path, capsys):
    assert run("pretrain", "--config", tiny, "--steps", 2, "--out", tmp_path / "ck", "--metrics", tmp_path / "m.csv") == 0
    capsys.readouterr()
    res = tmp_path / "r.csv"
    ck = tmp_path / "ck" / "pretrain.bolt"
    code = run("compare", "--config", tiny, "--strategies", "scratch,bolt", "--checkpoint", f"bolt={ck}", "--fractions", "1.0,0.5,0.1", "--results", res)
    assert code == 0
    header = capsys.readouterr().out.splitlines()[0].split()
    assert header == ["strategy", "100%", "50%", "10%"]
    rows = list(csv.DictReader(res.open()))
    assert {(r["strategy"], float(r["label_fraction"])) for r in rows} == {(s, f) for s in ("scratch", "bolt") for f in (1.0, 0.5, 0.1)}


def test_compare_missing_checkpoint(tiny, capsys):
    assert run("compare", "--config", tiny, "--strategies", "scratch,bolt") == 1
    assert "bolt" in capsys.readouterr().err


def _report(tiny, tmp_path, *extra):
    out = tmp_path / "r.json"
    assert run("inspect-perturb", "--config", tiny, "--seed", 3, "--out", out, *extra) == 0
    return json.loads(out.read_text())


def test_inspect_perturb_shapes_and_recomputation(tiny, tmp_path):
    rep = _report(tiny, tmp_path)
    c, s = rep["config"], rep["shapes"]
    assert c["K"] * c["S"] == c["N"] == 4
    assert s == {"tokens": [4, 16], "windows": [2, 32], "long_tokens": [2, 32], "split": [4, 16]}

    # independent recomputation in numpy from the serialised permutation
    cfg = parse_config(tiny)
    mc = cfg.model_config()
    online = build_online(mc, cfg.model.init_seed)
    pixels = torch.as_tensor(generate_synthetic(cfg.synthetic_spec()).images[0])
    z_o = (image_patches(pixels, mc) @ online.embed.E).detach().double().numpy()
    E_fuse = online.perturb.E_fuse.detach().double().numpy()
    N, S, M, D = c["N"], c["S"], c["M"], c["D"]
    for view in rep["views"]:
        perm = np.array(view["perm"])
        zp = z_o[perm]
        longs = [np.concatenate([zp[(k * S + j) % N] for j in range(M)]) @ E_fuse for k in range(N // S)]
        out = np.concatenate(longs).reshape(N, D)
        restored = np.empty_like(out)
        restored[perm] = out
        assert view["difficulty_score"] == pytest.approx(float(((restored - z_o) ** 2).mean()), rel=1e-5)
    a, b = (v["difficulty_score"] for v in rep["views"])
    assert rep["difficulty_label"] == (0 if a < b else 1)


def test_inspect_perturb_identity(tiny, tmp_path):
    rep = _report(tiny, tmp_path, "--identity")
    assert rep["config"]["identity"] is True
    assert [v["difficulty_score"] for v in rep["views"]] == [0.0, 0.0]


def test_inspect_perturb_image_file(tiny, tmp_path):
    from PIL import Image

    img = tmp_path / "x.png"
    Image.fromarray((np.random.default_rng(0).random((8, 8)) * 255).astype(np.uint8)).save(img)
    rep = _report(tiny, tmp_path, "--image", img)
    assert len(rep["views"][0]["perm"]) == 4
