import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from bolt.framework import (
    BoltTrainer,
    MLPHead,
    ModelConfig,
    NumericalError,
    TrainConfig,
    bolt_loss,
    build_online,
    difficulty_loss,
    ema_update,
    image_patches,
    lr_at,
    make_target,
    make_views,
    predict,
    project,
    similarity_loss,
    tau_at,
    total_loss,
)
from bolt.patch_embed import ConfigError, PatchEmbedConfig


def tiny_cfg(**kw):
    base = dict(embed=PatchEmbedConfig(4, 4, 1, 2, 8), depth=1, heads=2, mlp_ratio=2.0, M=2, proj_hidden=8, proj_dim=4)
    return ModelConfig(**{**base, **kw})


def tiny_images(n=4, seed=0):
    return np.random.default_rng(seed).random((n, 4, 4, 1)).astype(np.float32)


# -- heads ------------------------------------------------------------------------


def test_project_zero_weights_and_shape():
    head = MLPHead(8, 16, 4)
    assert project(torch.randn(3, 8), head).shape == (3, 4)
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
    assert torch.count_nonzero(project(torch.randn(5, 8), head)) == 0


def _hand_head():
    head = MLPHead(2, 2, 2)
    with torch.no_grad():
        head.fc1.weight.copy_(torch.tensor([[1.0, 0.0], [0.0, 2.0]]))
        head.fc1.bias.zero_()
        head.fc2.weight.copy_(torch.tensor([[1.0, 1.0], [2.0, -1.0]]))
        head.fc2.bias.copy_(torch.tensor([0.0, 1.0]))
    return head


def test_tiny_mlp_hand_forward():
    # (1,1) -> fc1 (1,2) -> norm ~(-1,1) -> gelu (-0.158655, 0.841345)
    # -> fc2 (-0.158655 + 0.841345, 2*-0.158655 - 0.841345 + 1)
    expected = torch.tensor([0.682689, -0.158655])
    x = torch.tensor([1.0, 1.0])
    torch.testing.assert_close(project(x, _hand_head()), expected, atol=1e-4, rtol=0)
    torch.testing.assert_close(predict(x, _hand_head()), expected, atol=1e-4, rtol=0)


def test_predictor_preserves_shape():
    online = build_online(tiny_cfg())
    assert predict(torch.randn(7, 4), online.predictor).shape == (7, 4)


# -- similarity loss --------------------------------------------------------------


def test_similarity_examples():
    u = torch.tensor([3.0, -1.0, 2.0])
    assert float(similarity_loss(u, u.clone())) == pytest.approx(0.0, abs=1e-6)
    assert float(similarity_loss(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]))) == pytest.approx(2.0, abs=1e-6)
    assert float(similarity_loss(torch.tensor([1.0, 0.0]), torch.tensor([1.0, 1.0]))) == pytest.approx(2 - 2 / math.sqrt(2), abs=1e-6)
    assert float(similarity_loss(u, -u)) == pytest.approx(4.0, abs=1e-6)


def test_similarity_errors_and_raw_mode():
    with pytest.raises(ValueError):
        similarity_loss(torch.zeros(3), torch.ones(3))
    with pytest.raises(ValueError):
        similarity_loss(torch.ones(3), torch.ones(4))
    assert float(similarity_loss(torch.tensor([3.0, 0.0]), torch.tensor([1.0, 0.0]), normalize=False)) == 4.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6))
def test_similarity_bounded(vals):
    u, v = torch.tensor(vals[:3], dtype=torch.float64), torch.tensor(vals[3:], dtype=torch.float64)
    if u.norm() < 1e-6 or v.norm() < 1e-6:
        return
    val = float(similarity_loss(u, v))
    assert -1e-12 <= val <= 4 + 1e-12


def test_similarity_target_gets_no_gradient():
    q = torch.randn(4, requires_grad=True)
    z = torch.randn(4, requires_grad=True)
    similarity_loss(q, z).backward()
    assert z.grad is None and q.grad is not None


# -- difficulty / total -------------------------------------------------------------


def dl(*args):
    return difficulty_loss(*args).detach()


def test_difficulty_loss_examples():
    head = nn.Linear(4, 1)
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    y = torch.randn(2)
    for label in (0, 1):
        assert float(dl(y, y, label, head).detach()) == pytest.approx(math.log(2), abs=1e-6)
    with torch.no_grad():
        head.bias.fill_(math.log(9.0))  # sigmoid -> 0.9
    assert float(dl(y, y, 0, head).detach()) == pytest.approx(-math.log(0.1), abs=1e-5)
    with torch.no_grad():
        head.bias.fill_(40.0)
    assert float(dl(y, y, 1, head).detach()) < 1e-6
    with torch.no_grad():
        head.bias.fill_(-400.0)
    assert math.isfinite(float(dl(y, y, 1, head).detach()))  # clamped


def test_difficulty_loss_target_gradient_is_zero():
    head = nn.Linear(8, 1)
    y_on = torch.randn(3, 4, requires_grad=True)
    y_tg = torch.randn(3, 4, requires_grad=True)
    difficulty_loss(y_on, y_tg, torch.tensor([0, 1, 1]), head).sum().backward()
    assert y_tg.grad is None or torch.count_nonzero(y_tg.grad) == 0
    assert y_on.grad.abs().sum() > 0


def test_total_loss_examples():
    assert total_loss(1.0, 0.5, 0.1) == pytest.approx(1.05)
    assert total_loss(2.5, 7.0, 0.0) == 2.5
    assert total_loss(0.0, 3.0, 0.1) == pytest.approx(0.3)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(tau_base=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(alpha=-1)
    with pytest.raises(ConfigError):
        TrainConfig(alpha=float("nan"))


# -- EMA ------------------------------------------------------------------------------


def test_ema_examples():
    online, target = nn.Linear(1, 1, bias=False), nn.Linear(1, 1, bias=False)
    with torch.no_grad():
        online.weight.fill_(0.0)
        target.weight.fill_(1.0)
    ema_update(online, target, 0.99)
    assert float(target.weight.detach()) == pytest.approx(0.99)
    before = target.weight.detach().clone()
    ema_update(online, target, 1.0)
    assert torch.equal(target.weight, before)
    ema_update(online, target, 0.0)
    assert torch.equal(target.weight, online.weight)
    assert float(online.weight.detach()) == 0.0


def test_ema_structural_mismatch():
    with pytest.raises(ConfigError):
        ema_update(nn.Linear(2, 2), nn.Linear(3, 2), 0.5)
    with pytest.raises(ValueError):
        ema_update(nn.Linear(2, 2), nn.Linear(2, 2), 1.5)


def test_tau_schedule():
    cfg = TrainConfig(tau_base=0.996, total_steps=100)
    assert tau_at(cfg, 0) == pytest.approx(0.996)
    assert tau_at(cfg, 50) == pytest.approx(0.998)
    assert tau_at(cfg, 100) == pytest.approx(1.0)
    assert tau_at(TrainConfig(tau_base=0.9, tau_schedule="constant"), 77) == 0.9


def test_lr_schedule():
    cfg = TrainConfig(lr=1e-3, total_steps=100)
    assert lr_at(cfg, 0) == 1e-3
    assert lr_at(cfg, 50) == pytest.approx(5e-4)
    assert lr_at(cfg, 100) == pytest.approx(0.0, abs=1e-15)
    assert lr_at(TrainConfig(lr=2e-3, lr_schedule="constant"), 99) == 2e-3
    with pytest.raises(ConfigError):
        TrainConfig(lr_schedule="step")


def test_target_is_copy_without_private_heads():
    online = build_online(tiny_cfg(), seed=1)
    target = make_target(online)
    assert not hasattr(target, "predictor") and not hasattr(target, "difficulty_head")
    for name, p in target.named_parameters():
        assert torch.equal(p, dict(online.named_parameters())[name])
        assert not p.requires_grad


# -- bolt loss ------------------------------------------------------------------------


def _views(online, seed=0, n=3):
    rng = np.random.default_rng(seed)
    patches = image_patches(torch.as_tensor(tiny_images(n, seed)), online.cfg)
    N = online.cfg.embed.N
    return make_views(online, patches, np.stack([rng.permutation(N) for _ in range(n)]), np.stack([rng.permutation(N) for _ in range(n)]))


def test_bolt_loss_swap_symmetry():
    online = build_online(tiny_cfg(), seed=2)
    target = make_target(online)
    with torch.no_grad():
        for p in target.parameters():
            p.add_(torch.randn_like(p) * 0.1)
    v = _views(online)
    a = bolt_loss(online, target, v.a, v.b)
    b = bolt_loss(online, target, v.b, v.a)
    assert abs(float(a.detach()) - float(b.detach())) < 1e-6


def test_bolt_loss_zero_for_identical_branches_and_views():
    online = build_online(tiny_cfg(), seed=3)
    online.predictor = nn.Identity()
    target = make_target(online)
    v = _views(online)
    assert float(bolt_loss(online, target, v.a, v.a).detach()) < 1e-6


def _ln(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * w + b


def _gelu(x):
    return 0.5 * x * (1 + torch.erf(x / math.sqrt(2)))


def _straight_line_represent(branch, tokens):
    """Independent forward: no module calls, only raw tensors."""
    sd = {k: v.double() for k, v in branch.state_dict().items()}
    heads = branch.cfg.heads
    x = torch.cat([sd["embed.cls_token"][None], tokens.double()]) + sd["embed.pos_emb"]
    n, d = x.shape
    dh = d // heads
    h = _ln(x, sd["encoder.blocks.0.norm1.weight"], sd["encoder.blocks.0.norm1.bias"])
    qkv = h @ sd["encoder.blocks.0.attn.qkv.weight"].T + sd["encoder.blocks.0.attn.qkv.bias"]
    q, k, v = qkv[:, :d], qkv[:, d : 2 * d], qkv[:, 2 * d :]
    outs = []
    for i in range(heads):
        sl = slice(i * dh, (i + 1) * dh)
        scores = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        w = torch.exp(scores - scores.max(-1, keepdim=True).values)
        w = w / w.sum(-1, keepdim=True)
        outs.append(w @ v[:, sl])
    x = x + torch.cat(outs, -1) @ sd["encoder.blocks.0.attn.proj.weight"].T + sd["encoder.blocks.0.attn.proj.bias"]
    h = _ln(x, sd["encoder.blocks.0.norm2.weight"], sd["encoder.blocks.0.norm2.bias"])
    h = _gelu(h @ sd["encoder.blocks.0.fc1.weight"].T + sd["encoder.blocks.0.fc1.bias"])
    x = x + h @ sd["encoder.blocks.0.fc2.weight"].T + sd["encoder.blocks.0.fc2.bias"]
    return _ln(x, sd["encoder.norm.weight"], sd["encoder.norm.bias"])[0]


def _straight_line_mlp(sd, prefix, x):
    h = x @ sd[prefix + "fc1.weight"].double().T + sd[prefix + "fc1.bias"].double()
    h = _gelu(_ln(h, sd[prefix + "norm.weight"].double(), sd[prefix + "norm.bias"].double()))
    return h @ sd[prefix + "fc2.weight"].double().T + sd[prefix + "fc2.bias"].double()


def test_bolt_loss_matches_straight_line_oracle():
    online = build_online(tiny_cfg(), seed=4)
    target = make_target(online)
    with torch.no_grad():
        for p in list(online.parameters()) + list(target.parameters()):
            p.add_(torch.randn_like(p) * 0.2)
    v = _views(online, n=2)
    got = float(bolt_loss(online, target, v.a, v.b).detach())

    osd, tsd = online.state_dict(), target.state_dict()

    def z(branch, sd, tokens):
        return _straight_line_mlp(sd, "projector.", _straight_line_represent(branch, tokens))

    def sim(u, w):
        u, w = u / u.norm(), w / w.norm()
        return ((u - w) ** 2).sum()

    total = 0.0
    for i in range(2):
        a, b = v.a[i].detach(), v.b[i].detach()
        qa = _straight_line_mlp(osd, "predictor.", z(online, osd, a))
        qb = _straight_line_mlp(osd, "predictor.", z(online, osd, b))
        total += float(sim(qa, z(target, tsd, b)) + sim(qb, z(target, tsd, a)))
    assert got == pytest.approx(total / 2, abs=1e-5)


def test_bolt_loss_only_online_gets_gradients():
    online = build_online(tiny_cfg(), seed=5)
    target = make_target(online)
    v = _views(online)
    bolt_loss(online, target, v.a, v.b).backward()
    assert all(p.grad is None for p in target.parameters())
    assert online.projector.fc1.weight.grad is not None and online.embed.E.grad is not None


# -- train step -----------------------------------------------------------------------


def test_train_step_lr_zero_keeps_parameters():
    t = BoltTrainer(tiny_cfg(), TrainConfig(lr=0.0, total_steps=10), seed=0)
    online0 = {k: v.clone() for k, v in t.online.state_dict().items()}
    target0 = {k: v.clone() for k, v in t.target.state_dict().items()}
    r1 = t.train_step(tiny_images())
    for k, v in t.online.state_dict().items():
        assert torch.equal(v, online0[k]), k
    for k, v in t.target.state_dict().items():
        torch.testing.assert_close(v, target0[k], atol=1e-7, rtol=1e-6)
    t2 = BoltTrainer(tiny_cfg(), TrainConfig(lr=0.0, total_steps=10), seed=0)
    assert t2.train_step(tiny_images()) == r1


def test_train_step_tau_one_freezes_target():
    t = BoltTrainer(tiny_cfg(), TrainConfig(tau_base=1.0, lr=1e-2), seed=1)
    before = {k: v.clone() for k, v in t.target.state_dict().items()}
    for s in range(5):
        t.train_step(tiny_images(seed=s))
    for k, v in t.target.state_dict().items():
        assert torch.equal(v, before[k])


def test_train_step_halfway_move():
    t = BoltTrainer(tiny_cfg(), TrainConfig(lr=0.0, weight_decay=0.0, tau_base=0.5, tau_schedule="constant"), seed=2)
    with torch.no_grad():
        for p in t.target.parameters():
            p.add_(torch.randn_like(p))
    online = dict(t.online.named_parameters())
    expected = {k: 0.5 * p.detach() + 0.5 * online[k].detach() for k, p in t.target.named_parameters()}
    t.train_step(tiny_images())
    for k, p in t.target.named_parameters():
        assert torch.equal(p, expected[k]), k


def test_train_step_loss_decreases_on_fixed_batch():
    t = BoltTrainer(tiny_cfg(), TrainConfig(lr=1e-3, total_steps=50), seed=3)
    batch = tiny_images(4, seed=9)
    losses = [t.train_step(batch).loss_total for _ in range(50)]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_train_report_fields():
    t = BoltTrainer(tiny_cfg(), TrainConfig(alpha=0.1), seed=4)
    r = t.train_step(tiny_images(6))
    assert r.step == 1 and t.step == 1
    assert abs(r.loss_total - (r.loss_bolt + 0.1 * r.loss_diff)) < 1e-6
    assert 0 <= r.diff_acc <= 1 and r.repr_std > 0
    assert r.csv_row().split(",")[0] == "1"
    assert len(r.csv_row().split(",")) == len(r.CSV_HEADER.split(","))


def test_train_step_is_deterministic():
    reports = []
    for _ in range(2):
        t = BoltTrainer(tiny_cfg(), TrainConfig(), seed=7)
        reports.append([t.train_step(tiny_images(seed=s)) for s in range(3)])
    assert reports[0] == reports[1]


def test_non_finite_loss_aborts_with_report():
    t = BoltTrainer(tiny_cfg(), TrainConfig(), seed=0)
    bad = tiny_images()
    bad[0, 0, 0, 0] = np.nan
    before = {k: v.clone() for k, v in t.online.state_dict().items()}
    with pytest.raises(NumericalError) as info:
        t.train_step(bad)
    assert info.value.report is not None and info.value.report.step == 1
    for k, v in t.online.state_dict().items():
        assert torch.equal(v, before[k])


def test_model_config_round_trip():
    cfg = tiny_cfg()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        tiny_cfg(identity_perturb=True, M=3)
