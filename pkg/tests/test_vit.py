import pytest
import torch

from bolt.patch_embed import ConfigError
from bolt.vit import ViT, ViTConfig, count_parameters, init_vit, vit_forward


def test_config_validation():
    with pytest.raises(ConfigError):
        ViTConfig(heads=3, D=64)
    with pytest.raises(ConfigError):
        ViTConfig(depth=0)
    with pytest.raises(ConfigError):
        ViTConfig(mlp_ratio=0)


def test_output_shape_and_batching():
    model = init_vit(ViTConfig(), seed=0)
    seq = torch.randn(5, 17, 64)
    out = vit_forward(seq, model)
    assert out.shape == (5, 64)
    assert vit_forward(seq[2], model).shape == (64,)
    torch.testing.assert_close(vit_forward(seq[2], model), out[2], atol=1e-6, rtol=0)
    assert torch.isfinite(out).all()


def test_width_mismatch():
    with pytest.raises(ConfigError):
        init_vit(ViTConfig())(torch.randn(17, 32))


def test_attention_rows_sum_to_one():
    model = init_vit(ViTConfig(), seed=1)
    for attn in model.attention_maps(torch.randn(3, 17, 64)):
        assert attn.shape == (3, 4, 17, 17)
        assert (attn.sum(-1) - 1).abs().max() < 1e-6


def test_class_token_invariant_to_patch_order():
    g = torch.Generator().manual_seed(0)
    model = init_vit(ViTConfig(), seed=2)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g) * 0.05)
    seq = torch.randn(17, 64, generator=g)
    ref = model(seq)
    for _ in range(10):
        perm = torch.randperm(16, generator=g) + 1
        shuffled = torch.cat([seq[:1], seq[perm]])
        assert (model(shuffled) - ref).abs().max() < 1e-5


def test_init_deterministic_and_seed_sensitive():
    a, b, c = init_vit(ViTConfig(), 3), init_vit(ViTConfig(), 3), init_vit(ViTConfig(), 4)
    for (na, pa), pb, pc in zip(a.named_parameters(), b.parameters(), c.parameters()):
        assert torch.equal(pa, pb)
        if na.endswith("weight") and pa.dim() == 2:
            assert not torch.equal(pa, pc)
            assert pa.abs().max() <= 0.04
        if na.endswith("bias") and pa.dim() == 1 and "norm" not in na:
            assert torch.count_nonzero(pa) == 0


def test_parameter_count_closed_form():
    D, hidden, depth = 64, 256, 2
    per_block = (
        2 * D  # norm1
        + (D * 3 * D + 3 * D)  # qkv
        + (D * D + D)  # proj
        + 2 * D  # norm2
        + (D * hidden + hidden)
        + (hidden * D + D)
    )
    assert per_block == 49_984
    assert count_parameters(init_vit(ViTConfig(depth=2, heads=4, D=64, mlp_ratio=4, N=16))) == depth * per_block + 2 * D == 100_096


def test_forward_is_deterministic():
    model = init_vit(ViTConfig(), 0)
    seq = torch.randn(17, 64)
    assert torch.equal(model(seq), model(seq))


def test_layer_norm_standardises_rows():
    model = init_vit(ViTConfig(), 0)
    x = torch.randn(6, 64) * 3 + 1
    out = torch.nn.functional.layer_norm(x, (64,), eps=model.norm.eps)
    assert out.mean(-1).abs().max() < 1e-5
    assert (out.var(-1, unbiased=False) - 1).abs().max() < 1e-4  # eps=1e-5 shrinks variance slightly


def test_gradients_match_finite_differences():
    torch.manual_seed(0)
    model = init_vit(ViTConfig(depth=1, heads=2, D=8, mlp_ratio=2, N=4), seed=0, dtype=torch.float64)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p) * 0.3)
    seq = torch.randn(2, 5, 8, dtype=torch.float64)
    w = torch.randn(2, 8, dtype=torch.float64)

    def loss():
        return (model(seq) * w).sum() + model(seq).pow(2).sum() * 0.1

    model.zero_grad()
    loss().backward()
    h = 1e-3
    for name, p in model.named_parameters():
        numeric = torch.zeros_like(p)
        flat = p.data.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss()
                flat[i] = old - h
                down = loss()
                flat[i] = old
                numeric.view(-1)[i] = (up - down) / (2 * h)
        rel = (numeric - p.grad).norm() / max(p.grad.norm(), 1e-12)
        assert rel < 1e-4, name


def test_vit_class_is_module():
    assert isinstance(init_vit(ViTConfig()), ViT)
