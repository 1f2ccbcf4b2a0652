import itertools

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from multiid.errors import GridInvalid, LambdaNegative, ModeInvalid, RegionOutOfBounds, ShapeMismatch
from multiid.supervision import (
    BACKGROUND,
    MaskVolume,
    Region,
    build_masks,
    downsample_masks,
    load_mask,
    mse_term,
    routing_loss,
    routing_term,
    save_mask,
)


def trilinear_oracle(vol: np.ndarray, out: tuple[int, int, int]) -> np.ndarray:
    """Half-pixel-centre trilinear resampling of a (T, H, W) volume, written as explicit loops."""
    res = np.zeros(out)
    src = vol.shape

    def coords(i, n_in, n_out):
        x = max((i + 0.5) * n_in / n_out - 0.5, 0.0)
        lo = min(int(np.floor(x)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        return lo, hi, x - lo

    for i, j, k in itertools.product(*map(range, out)):
        (t0, t1, ft), (y0, y1, fy), (x0, x1, fx) = (coords(a, n, m) for a, n, m in zip((i, j, k), src, out))
        acc = 0.0
        for tt, wt in ((t0, 1 - ft), (t1, ft)):
            for yy, wy in ((y0, 1 - fy), (y1, fy)):
                for xx, wx in ((x0, 1 - fx), (x1, fx)):
                    acc += wt * wy * wx * vol[tt, yy, xx]
        res[i, j, k] = acc
    return res


def downsample_oracle(labels: np.ndarray, n_ids: int, grid):
    chans = np.stack([trilinear_oracle((labels == c).astype(float), grid) for c in range(-1, n_ids)])
    winner = np.argmax(chans, axis=0)  # first max: background (channel 0) wins ties
    ident = np.argmax(chans[1:], axis=0)
    return np.where(winner != 0, ident, BACKGROUND)


def random_mask(rng, n_ids, shape):
    return MaskVolume(rng.integers(-1, n_ids, size=shape).astype(np.int8), n_ids)


def test_downsample_matches_loop_oracle_randomized(rng):
    for _ in range(100):
        n = int(rng.integers(1, 4))
        shape = tuple(int(v) for v in rng.integers(2, 7, 3))
        grid = tuple(int(rng.integers(1, s + 1)) for s in shape)
        mask = random_mask(rng, n, shape)
        got = downsample_masks(mask, grid)
        assert np.array_equal(got.labels, downsample_oracle(mask.labels, n, grid))
        assert np.array_equal(got.valid, got.labels != BACKGROUND)


def test_downsample_constant_label():
    mask = MaskVolume(np.ones((4, 8, 8), np.int8), 2)
    rl = downsample_masks(mask, (2, 4, 4))
    assert (rl.labels == 1).all() and rl.valid.all()
    assert (rl.one_hot[1] == 1).all() and (rl.one_hot[0] == 0).all()


def test_downsample_background_everywhere():
    rl = downsample_masks(MaskVolume(np.full((2, 4, 4), -1, np.int8), 2), (1, 2, 2))
    assert not rl.valid.any() and (rl.one_hot == 0).all()


def test_downsample_grid_invalid():
    with pytest.raises(GridInvalid):
        downsample_masks(MaskVolume(np.zeros((2, 4, 4), np.int8), 1), (3, 2, 2))
    with pytest.raises(GridInvalid):
        downsample_masks(MaskVolume(np.zeros((2, 4, 4), np.int8), 1), (0, 2, 2))


def test_build_masks_box_vs_seg():
    seg = np.zeros((3, 3), bool)
    seg[1, 1] = True
    regions = [[Region(0, 0, 3, 3, seg)]]
    box = build_masks((1, 4, 4), regions, "box").labels
    s = build_masks((1, 4, 4), regions, "seg").labels
    assert (box[0, :3, :3] == 0).all() and box.sum() == -7
    assert s[0, 1, 1] == 0 and (s == 0).sum() == 1


def test_build_masks_overlap_lowest_index_wins():
    regions = [[Region(0, 0, 2, 2)], [Region(1, 1, 2, 2)]]
    lab = build_masks((1, 3, 3), regions, "box").labels[0]
    assert lab[1, 1] == 0 and lab[2, 2] == 1


def test_build_masks_errors():
    with pytest.raises(RegionOutOfBounds):
        build_masks((1, 4, 4), [[Region(3, 3, 2, 2)]])
    with pytest.raises(ModeInvalid):
        build_masks((1, 4, 4), [[Region(0, 0, 2, 2)]], "poly")
    with pytest.raises(ShapeMismatch):
        Region(0, 0, 2, 2, np.ones((3, 3), bool))


def test_mask_roundtrip_and_layout(tmp_path, rng):
    mask = random_mask(rng, 3, (5, 4, 6))
    save_mask(mask, tmp_path / "m.i8")
    raw = np.frombuffer((tmp_path / "m.i8").read_bytes(), dtype="<i1")
    assert raw[1] == mask.labels[0, 0, 1]  # width fastest
    assert raw[6] == mask.labels[0, 1, 0]
    back = load_mask(tmp_path / "m.i8")
    assert np.array_equal(back.labels, mask.labels) and back.n_ids == 3


def ce_oracle(logits, one_hot, valid):
    n, L = logits.shape
    total, count = 0.0, 0
    for p in range(L):
        if not valid[p]:
            continue
        m = max(logits[:, p])
        lse = m + np.log(sum(np.exp(logits[k, p] - m) for k in range(n)))
        total += -sum(one_hot[k, p] * (logits[k, p] - lse) for k in range(n)) / n
        count += 1
    return total / max(count, 1)


def test_routing_term_loop_oracle(rng):
    for _ in range(50):
        n, L = int(rng.integers(1, 4)), int(rng.integers(1, 9))
        logits = rng.normal(size=(n, L)) * 3
        lab = rng.integers(-1, n, L)
        valid = lab >= 0
        oh = np.zeros((n, L))
        oh[lab[valid], np.nonzero(valid)[0]] = 1
        got = routing_term(torch.tensor(logits), torch.tensor(oh), torch.tensor(valid))
        assert abs(float(got) - ce_oracle(logits, oh, valid)) < 1e-10


def test_routing_term_two_ids_hand_value():
    logits = torch.tensor([[0.0], [0.0]], dtype=torch.float64)
    oh = torch.tensor([[1.0], [0.0]], dtype=torch.float64)
    assert abs(float(routing_term(logits, oh, torch.tensor([True]))) - np.log(2) / 2) < 1e-12


def test_background_has_zero_gradient(rng):
    logits = torch.tensor(rng.normal(size=(2, 3, 10)), requires_grad=True)
    lab = torch.tensor(rng.integers(-1, 3, (2, 10)))
    valid = lab >= 0
    oh = torch.nn.functional.one_hot(lab.clamp(min=0), 3).permute(0, 2, 1).double() * valid[:, None]
    routing_term(logits, oh, valid).backward()
    assert (logits.grad.permute(0, 2, 1)[~valid] == 0).all()
    assert (logits.grad.permute(0, 2, 1)[valid] != 0).any()


def test_routing_loss_lambda_zero_bit_exact(rng):
    ld = torch.tensor(0.123456789, dtype=torch.float64)
    logits = torch.tensor(rng.normal(size=(2, 6)))
    oh = torch.zeros(2, 6, dtype=torch.float64)
    oh[0] = 1
    out = routing_loss(logits, oh, torch.ones(6, dtype=torch.bool), ld, lam=0.0)
    assert out is ld or torch.equal(out, ld)
    assert routing_loss(logits, oh, torch.ones(6, dtype=torch.bool), ld, 1.0, "none") is ld


def test_routing_loss_value_and_layers(rng):
    ld = torch.tensor(0.5, dtype=torch.float64)
    a, b = (torch.tensor(rng.normal(size=(2, 5))) for _ in range(2))
    oh = torch.tensor([[1, 0, 1, 0, 1], [0, 1, 0, 1, 0]], dtype=torch.float64)
    v = torch.tensor([True, True, False, True, True])
    single = routing_loss(a, oh, v, ld, 0.7)
    assert torch.allclose(single, ld + 0.7 * routing_term(a, oh, v))
    both = routing_loss([a, b], oh, v, ld, 1.0)
    assert torch.allclose(both, ld + (routing_term(a, oh, v) + routing_term(b, oh, v)) / 2)
    m = routing_loss(a, oh, v, ld, 1.0, "mse")
    assert torch.allclose(m, ld + mse_term(a, oh, v))


def test_mse_term_oracle(rng):
    logits = rng.normal(size=(3, 7))
    lab = rng.integers(-1, 3, 7)
    valid = lab >= 0
    oh = np.zeros((3, 7))
    oh[lab[valid], np.nonzero(valid)[0]] = 1
    p = np.exp(logits) / np.exp(logits).sum(0)
    expect = np.mean([((p[:, i] - oh[:, i]) ** 2).mean() for i in range(7) if valid[i]])
    got = mse_term(torch.tensor(logits), torch.tensor(oh), torch.tensor(valid))
    assert abs(float(got) - expect) < 1e-12


def test_routing_loss_errors():
    z = torch.zeros(2, 3)
    with pytest.raises(LambdaNegative):
        routing_loss(z, z, torch.ones(3, dtype=torch.bool), torch.tensor(0.0), -1.0)
    with pytest.raises(ModeInvalid):
        routing_loss(z, z, torch.ones(3, dtype=torch.bool), torch.tensor(0.0), 1.0, "kl")
    with pytest.raises(ShapeMismatch):
        routing_term(z, torch.zeros(3, 3), torch.ones(3, dtype=torch.bool))


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 12)),
                  elements=st.floats(-20, 20)), st.floats(0, 5))
def test_routing_loss_nonnegative_and_monotone_in_lambda(logits, lam):
    n, L = logits.shape
    oh = np.zeros((n, L))
    oh[0] = 1
    t = torch.tensor(logits)
    v = torch.ones(L, dtype=torch.bool)
    ld = torch.tensor(0.1, dtype=torch.float64)
    a = routing_loss(t, torch.tensor(oh), v, ld, lam)
    b = routing_loss(t, torch.tensor(oh), v, ld, lam + 1)
    assert float(a) >= 0.1 - 1e-12 and float(b) >= float(a) - 1e-12
