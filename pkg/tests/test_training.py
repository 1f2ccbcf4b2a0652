import numpy as np
import pytest
import torch

from conftest import tiny_model_config
from multiid.errors import CorruptFile, ModeInvalid, NonFiniteLoss, ProbsInvalid, VersionMismatch
from multiid.model import IngredientsModel
from multiid.training import (
    CONDITION_MODES,
    MAGIC,
    TRAINABLE,
    CheckpointBundle,
    FreezePolicy,
    TrainConfig,
    bundle_from_model,
    canonical_name,
    freeze_audit,
    group_of,
    load_checkpoint,
    model_from_bundle,
    named_groups,
    read_loss_log,
    run_stage,
    sample_condition_mode,
    save_checkpoint,
    smooth,
    write_loss_log,
)


@pytest.fixture(scope="module")
def stages(tiny_corpus):
    cfg, corpus = tiny_corpus
    s0 = run_stage(TrainConfig(stage=0, steps=6, batch_size=2), corpus, None, cfg, log_every=0)
    s1 = run_stage(TrainConfig(stage=1, steps=6, batch_size=2), corpus, s0.bundle, log_every=0)
    s2 = run_stage(TrainConfig(stage=2, steps=6, batch_size=2), corpus, s1.bundle, log_every=0)
    return s0, s1, s2


def test_condition_mode_frequencies():
    rng = np.random.default_rng(0)
    draws = [sample_condition_mode((1 / 3, 1 / 3, 1 / 3), rng) for _ in range(3000)]
    for m in CONDITION_MODES:
        assert 850 <= draws.count(m) <= 1150
    assert {sample_condition_mode((0, 1, 0), rng) for _ in range(50)} == {"local_only"}


def test_condition_probs_invalid():
    with pytest.raises(ProbsInvalid):
        sample_condition_mode((0.5, 0.5, 0.5), np.random.default_rng(0))
    with pytest.raises(ProbsInvalid):
        TrainConfig(drop_probs=(1.2, -0.2, 0.0))
    with pytest.raises(ModeInvalid):
        TrainConfig(loss_variant="kl")
    with pytest.raises(ValueError):
        TrainConfig(stage=3)


def test_canonical_names():
    assert canonical_name("backbone.cond_embed.weight") == "extractor.cond_embed.weight"
    assert canonical_name("backbone.blocks.3.qkv.lora_A.stage2") == "lora.stage2.blocks.3.qkv.A"
    assert canonical_name("router.f.1.weight") == "router.f.1.weight"
    assert group_of("lora.stage1.blocks.0.proj.B") == "lora.stage1"
    assert group_of("projector.latents") == "projector"


def test_freeze_policy_groups():
    groups = {"backbone", "extractor", "projector", "router", "lora.stage1", "lora.stage2"}
    p1 = FreezePolicy.for_stage(1, groups)
    assert {g for g, t in p1.trainable.items() if t} == TRAINABLE[1]
    p2 = FreezePolicy.for_stage(2, groups)
    assert {g for g, t in p2.trainable.items() if t} == {"router", "lora.stage2"}
    assert not FreezePolicy.for_stage(0, groups, "t2v").trainable["extractor"]


def test_checkpoint_roundtrip_byte_identical(stages, tmp_path):
    b = stages[1].bundle
    save_checkpoint(b, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.step == b.step and back.config == b.config
    assert all(np.array_equal(back.params[k], b.params[k]) for k in b.params)
    assert back.optimizer.keys() == b.optimizer.keys() and back.optimizer


def test_checkpoint_corruption(stages, tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(stages[0].bundle, path)
    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[: len(raw) - 10])
    with pytest.raises(CorruptFile):
        load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CorruptFile):
        load_checkpoint(tmp_path / "magic.ckpt")
    flipped = bytearray(raw)
    flipped[-1] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CorruptFile):
        load_checkpoint(tmp_path / "flip.ckpt")
    bundle = CheckpointBundle({"x": np.zeros(2, np.float32)})
    save_checkpoint(bundle, tmp_path / "v.ckpt")
    data = (tmp_path / "v.ckpt").read_bytes().replace(b'"version":1', b'"version":9')
    (tmp_path / "v.ckpt").write_bytes(data)
    with pytest.raises(VersionMismatch):
        load_checkpoint(tmp_path / "v.ckpt")
    assert raw[:8] == MAGIC


def test_stage2_model_maps_names_and_adds_zero_adapter(stages):
    b1 = stages[1].bundle
    m = model_from_bundle(b1, extra_lora="stage2")
    named = named_groups(m)
    for k, v in b1.params.items():
        assert np.array_equal(named[k].detach().numpy(), v)
    new = [k for k in named if k not in b1.params]
    assert new and all(k.startswith("lora.stage2.") for k in new)
    assert all((named[k] == 0).all() for k in new if k.endswith(".B"))


def test_freeze_audit_after_stage2(stages):
    _, s1, s2 = stages
    frozen = s1.bundle.groups() - TRAINABLE[2]
    assert frozen >= {"backbone", "extractor", "projector", "lora.stage1"}
    assert freeze_audit(s1.bundle, s2.bundle, frozen) == []
    changed = [k for k in s2.bundle.params if group_of(k) == "router"
               and not np.array_equal(s1.bundle.params[k], s2.bundle.params[k])]
    assert changed


def test_stage1_leaves_backbone_and_router(stages):
    s0, s1, _ = stages
    assert freeze_audit(s0.bundle, s1.bundle, {"backbone", "router"}) == []
    assert freeze_audit(s0.bundle, s1.bundle, {"projector"})


def test_training_deterministic(tiny_corpus, stages, tmp_path):
    cfg, corpus = tiny_corpus
    again = run_stage(TrainConfig(stage=0, steps=6, batch_size=2), corpus, None, cfg, log_every=0)
    save_checkpoint(again.bundle, tmp_path / "a.ckpt")
    save_checkpoint(stages[0].bundle, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_history_fields(stages):
    s0, s1, s2 = stages
    assert all(np.isnan(h["l_route_term"]) for h in s1.history)
    assert all(h["mode"] == "both" and h["l_route_term"] > 0 for h in s2.history)
    assert {h["mode"] for h in s1.history} <= set(CONDITION_MODES)


def test_wrong_stage_chain(stages, tiny_corpus):
    with pytest.raises(ValueError):
        run_stage(TrainConfig(stage=2, steps=1), tiny_corpus[1], stages[0].bundle)
    with pytest.raises(ValueError):
        run_stage(TrainConfig(stage=1, steps=1), tiny_corpus[1], None)


def test_non_finite_loss_raises(stages, tiny_corpus):
    b = stages[0].bundle
    params = dict(b.params)
    params["backbone.final.bias"] = np.full_like(params["backbone.final.bias"], np.nan)
    bad = CheckpointBundle(params, {}, b.step, b.config)
    with pytest.raises(NonFiniteLoss):
        run_stage(TrainConfig(stage=1, steps=2, batch_size=2), tiny_corpus[1], bad, log_every=0)


def test_loss_log_roundtrip_appends(stages, tmp_path):
    hist = stages[2].history
    write_loss_log(hist[:3], tmp_path / "l.csv")
    write_loss_log(hist[3:], tmp_path / "l.csv")
    back = read_loss_log(tmp_path / "l.csv")
    assert len(back) == len(hist)
    assert all(abs(a["l_diff"] - b["l_diff"]) < 1e-12 for a, b in zip(back, hist))


def test_smooth_trailing_mean_oracle(rng):
    v = rng.random(30)
    s = smooth(v, 7)
    for i in range(30):
        assert abs(s[i] - v[max(0, i - 6):i + 1].mean()) < 1e-12


def test_bundle_from_model_names():
    torch.manual_seed(0)
    m = IngredientsModel(tiny_model_config())
    m.backbone.add_lora("stage1", 2)
    b = bundle_from_model(m)
    assert "extractor.cond_embed.weight" in b.params
    assert "lora.stage1.blocks.1.proj.A" in b.params
    assert b.groups() == {"backbone", "extractor", "projector", "router", "lora.stage1"}
