import itertools

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from multiid.backbone import (
    BackboneConfig,
    LoRAAdapter,
    LoRALinear,
    MiniVideoDiT,
    TextStub,
    ToyCodec,
    from_model_space,
    lora_apply,
    lora_merge,
    to_model_space,
)
from multiid.diffusion import (
    NoiseSchedule,
    add_noise,
    ddim_step,
    diffusion_loss,
    guided_noise,
    sample,
)
from multiid.errors import RankInvalid, ShapeMismatch, TimestepOutOfRange


def test_codec_decode_encode_is_block_mean(rng):
    codec = ToyCodec((2, 4, 4), (2, 2, 2))
    v = rng.random((3, 4, 8, 8))
    rec = codec.decode(codec.encode(torch.tensor(v))).numpy()
    for c, t, y, x in itertools.product(range(3), range(4), range(8), range(8)):
        t0, y0, x0 = 2 * (t // 2), 2 * (y // 2), 2 * (x // 2)
        assert abs(rec[c, t, y, x] - v[c, t0:t0 + 2, y0:y0 + 2, x0:x0 + 2].mean()) < 1e-12


def test_codec_channel_layout(rng):
    codec = ToyCodec((2, 4, 4), (2, 2, 2))
    v = torch.tensor(rng.random((3, 2, 4, 4)))
    lat = codec.encode(v)
    assert lat.shape == (12, 1, 1, 1) and codec.latent_channels(3) == 12
    for c, dh, dw in itertools.product(range(3), range(2), range(2)):
        cell = v[c, :, 2 * dh:2 * dh + 2, 2 * dw:2 * dw + 2].mean()
        assert torch.isclose(lat[c * 4 + dh * 2 + dw, 0, 0, 0], cell)


def test_codec_encode_decode_identity(rng):
    codec = ToyCodec((2, 4, 4), (2, 2, 2))
    lat = torch.tensor(rng.normal(size=(12, 2, 3, 2)))
    assert torch.allclose(codec.encode(codec.decode(lat)), lat)


def test_codec_plain_average_default(rng):
    codec = ToyCodec((2, 4, 4))
    v = torch.tensor(rng.random((3, 2, 4, 4)))
    assert torch.allclose(codec.encode(v)[:, 0, 0, 0], v.mean(dim=(1, 2, 3)))
    with pytest.raises(ShapeMismatch):
        codec.encode(torch.zeros(3, 3, 4, 4))
    with pytest.raises(ShapeMismatch):
        ToyCodec((2, 4, 4), (2, 3, 2))


def test_model_space_roundtrip(rng):
    z = torch.tensor(rng.random((3, 4)))
    assert torch.allclose(from_model_space(to_model_space(z)), z)


def test_text_stub():
    t = TextStub(16)
    assert torch.equal(t("a"), t("a")) and not torch.equal(t("a"), t("b"))
    assert torch.equal(t(""), torch.zeros(16)) and torch.equal(t.null(), torch.zeros(16))
    assert abs(float(t("hello").norm()) - 1) < 1e-6


def test_lora_zero_b_is_base(rng):
    base = torch.tensor(rng.normal(size=(5, 4)))
    ad = LoRAAdapter(torch.tensor(rng.normal(size=(2, 4))), torch.zeros(5, 2, dtype=torch.float64))
    x = torch.tensor(rng.normal(size=(3, 4)))
    assert torch.equal(lora_apply(base, ad, x), x @ base.T)


def test_lora_apply_equals_merge(rng):
    base = torch.tensor(rng.normal(size=(5, 4)))
    ad = LoRAAdapter(torch.tensor(rng.normal(size=(2, 4))), torch.tensor(rng.normal(size=(5, 2))), 0.5)
    x = torch.tensor(rng.normal(size=(3, 4)))
    assert torch.allclose(lora_apply(base, ad, x), x @ lora_merge(base, ad).T)


def test_lora_rank_and_shape_errors(rng):
    base = torch.zeros(5, 4)
    with pytest.raises(RankInvalid):
        lora_apply(base, LoRAAdapter(torch.zeros(5, 4), torch.zeros(5, 5)), torch.zeros(4))
    with pytest.raises(ShapeMismatch):
        lora_apply(base, LoRAAdapter(torch.zeros(2, 3), torch.zeros(5, 2)), torch.zeros(4))
    with pytest.raises(RankInvalid):
        LoRALinear(4, 5).add_adapter("x", 0)


def test_lora_linear_sums_named_adapters(rng):
    torch.manual_seed(0)
    lin = LoRALinear(4, 3)
    lin.add_adapter("a", 2)
    lin.add_adapter("b", 1)
    lin.double()
    x = torch.tensor(rng.normal(size=(2, 4)))
    assert torch.allclose(lin(x), lin.base(x))  # fresh adapters have B = 0
    with torch.no_grad():
        for n in ("a", "b"):
            lin.lora_B[n].normal_()
    w = lin.base.weight
    for n in ("a", "b"):
        w = lora_merge(w, lin.adapter(n))
    assert torch.allclose(lin(x), x @ w.T + lin.base.bias)


def test_backbone_shapes_and_hook():
    torch.manual_seed(0)
    cfg = BackboneConfig(latent_channels=12, grid=(2, 4, 4), patch=(1, 2, 2), width=16, depth=2, heads=2, text_width=8)
    net = MiniVideoDiT(cfg)
    x = torch.randn(2, 12, 2, 4, 4)
    seen = []

    def hook(layer, H):
        seen.append((layer, H.shape))
        return H

    out = net(x, torch.tensor([3, 7]), torch.randn(2, 8), torch.randn(2, 12, 2, 4, 4), hook)
    assert out.shape == x.shape
    assert seen == [(0, (2, 8, 16)), (1, (2, 8, 16))]
    assert torch.equal(net.unpatchify(net.patchify(x)), x)
    with pytest.raises(ShapeMismatch):
        net(torch.randn(1, 3, 2, 4, 4), torch.tensor([1]), torch.randn(1, 8))


def test_zero_cond_embed_ignores_global(rng):
    torch.manual_seed(0)
    cfg = BackboneConfig(latent_channels=3, grid=(2, 4, 4), width=8, depth=1, heads=1, text_width=4)
    net = MiniVideoDiT(cfg)
    x = torch.randn(1, 3, 2, 4, 4)
    assert torch.equal(net.embed(x, torch.randn(1, 3, 2, 4, 4)), net.embed(x, None))


def test_add_noise_scalar_loop_oracle(rng):
    sched = NoiseSchedule()
    for _ in range(100):
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        x0, eps = rng.normal(size=shape), rng.normal(size=shape)
        t = rng.integers(0, 1000, shape[0])
        got = add_noise(torch.tensor(x0), torch.tensor(eps), torch.tensor(t), sched).numpy()
        for b in range(shape[0]):
            ab = 1.0
            for s in range(t[b] + 1):
                ab *= 1.0 - (1e-4 + (0.02 - 1e-4) * s / 999)
            for j in range(shape[1]):
                assert abs(got[b, j] - (ab ** 0.5 * x0[b, j] + (1 - ab) ** 0.5 * eps[b, j])) < 1e-10


def test_schedule_endpoints_and_errors():
    sched = NoiseSchedule()
    assert abs(float(sched.alpha_bar(0)) - (1 - 1e-4)) < 1e-15
    assert 0 < float(sched.alpha_bar(999)) < 1e-4
    assert sched.inference_timesteps(50)[:3] == [980, 960, 940] and sched.inference_timesteps(50)[-1] == 0
    with pytest.raises(TimestepOutOfRange):
        sched.alpha_bar(1000)
    with pytest.raises(ShapeMismatch):
        add_noise(torch.zeros(2), torch.zeros(3), 0, sched)


def test_diffusion_loss_and_guidance(rng):
    a, b = torch.tensor(rng.normal(size=(4, 5))), torch.tensor(rng.normal(size=(4, 5)))
    assert torch.isclose(diffusion_loss(a, b), ((a - b) ** 2).mean())
    assert torch.equal(guided_noise(a, b, 1.0), a)
    assert torch.allclose(guided_noise(a, b, 6.0), b + 6 * (a - b))
    with pytest.raises(ShapeMismatch):
        diffusion_loss(a, b[:3])


def test_ddim_recovers_point_mass():
    """With the exact noise of a single-point data distribution, DDIM lands on that point."""
    sched = NoiseSchedule()
    target = torch.tensor([[0.3, -1.2, 2.0]], dtype=torch.float64)

    def model(x, t, c):
        ab = float(sched.alpha_bars[t])
        return (x - ab ** 0.5 * target) / (1 - ab) ** 0.5

    out = sample(model, (1, 3), sched, steps=50, guidance=1.0, seed=3, dtype=torch.float64)
    assert torch.allclose(out, target, atol=1e-10)


def test_ddim_step_deterministic_inverse(rng):
    x, eps = torch.tensor(rng.normal(size=4)), torch.tensor(rng.normal(size=4))
    y = ddim_step(x, eps, 0.3, 0.6)
    assert torch.allclose(ddim_step(y, eps, 0.6, 0.3), x)


def test_sample_seeded_and_start_t(rng):
    sched = NoiseSchedule()
    calls = []

    def model(x, t, c):
        calls.append(t)
        return torch.zeros_like(x)

    a = sample(model, (2, 3), sched, steps=10, guidance=6.0, seed=5)
    b = sample(model, (2, 3), sched, steps=10, guidance=6.0, seed=5)
    assert torch.equal(a, b) and len(calls) == 40
    calls.clear()
    sample(model, (2, 3), sched, steps=10, guidance=1.0, x_init=torch.zeros(2, 3), start_t=400)
    assert calls == [400, 300, 200, 100, 0]


@given(st.integers(0, 999), st.floats(-3, 3), st.floats(-3, 3))
def test_add_noise_variance_preserving(t, x0, eps):
    sched = NoiseSchedule()
    ab = float(sched.alpha_bar(t))
    xt = float(add_noise(torch.tensor([x0], dtype=torch.float64), torch.tensor([eps], dtype=torch.float64), t, sched))
    assert abs(xt - (ab ** 0.5 * x0 + (1 - ab) ** 0.5 * eps)) < 1e-12
