import dataclasses

import pytest
import torch

from iag.diffengine import checkpoint, grad_check
from iag.jointtrain import (
    Batcher, RunLog, TrainConfig, apply_ablation, build_models, total_loss, train,
)
from iag.poisoncraft import build_records, plan_poison
from iag.scenegen import SceneConfig, generate_dataset
from iag.triggergen import GeneratorConfig
from iag.victim import VictimConfig

TINY_V = VictimConfig(d_model=32, n_layers=1, n_heads=2)
TINY_G = GeneratorConfig(channels=(4, 8, 8), d_cond=8, heads=2)


@pytest.fixture(scope="module")
def scenes():
    return generate_dataset(SceneConfig(counts={"train": 40})).split("train")


def make_batch(models, scenes, poisoned_ids, n=4, seed=0):
    records = build_records(scenes[:n], poisoned_ids, seed, 0)
    return Batcher(models.vocab, scenes[:n]).collate(models.victim, records)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(ablation="nope").validate()
    with pytest.raises(ValueError):
        TrainConfig(beta=-1).validate()
    with pytest.raises(ValueError):
        TrainConfig(max_grad_norm=0.0).validate()
    cfg = TrainConfig.toy()
    assert (cfg.lr, cfg.batch_size, cfg.max_grad_norm) == (3e-4, 16, 1.0)
    assert apply_ablation("none", cfg) == cfg
    assert apply_ablation("two_stage", cfg).ablation == "two_stage"


def test_loss_decomposition(scenes):
    models = build_models(0, TINY_V, TINY_G)
    ids = [scenes[1].id, scenes[3].id]
    batch = make_batch(models, scenes, ids)
    with torch.no_grad():
        models.generator.out_w.normal_(0, 0.1)
    torch.set_grad_enabled(False)
    t = total_loss(models, batch, TrainConfig(beta=0.5))
    assert float(t.total) == pytest.approx(float(t.lm_clean + t.lm_poison + 0.5 * t.rec), rel=1e-6)
    t0 = total_loss(models, batch, TrainConfig(beta=0.0))
    assert float(t0.total) == pytest.approx(float(t0.lm_clean + t0.lm_poison), rel=1e-6)
    clean = make_batch(models, scenes, [])
    tc = total_loss(models, clean, TrainConfig(beta=0.5))
    assert float(tc.total) == float(tc.lm_clean) and float(tc.rec) == 0.0
    nl = total_loss(models, batch, TrainConfig(ablation="no_lm_loss"))
    assert float(nl.total) == pytest.approx(0.5 * float(nl.rec))
    torch.set_grad_enabled(True)


def test_gradient_through_poison_path(f64, scenes):
    models = build_models(0, TINY_V, TINY_G)
    with torch.no_grad():
        models.generator.out_w.normal_(0, 0.05)
    batch = make_batch(models, scenes, [scenes[0].id], n=2)
    batch["images"] = batch["images"] * 0.8 + 0.1  # keep away from the clamp kinks
    cfg = TrainConfig(beta=0.5)
    gen = dict(models.generator.named_parameters())
    params = {k: gen[k] for k in ("out_w", "enc1.0.w", "attn3.w_v", "attn1.w_q")}
    params["victim.patch_w"] = models.victim.patch_w
    rep = grad_check(lambda: total_loss(models, batch, cfg).total, params, max_coords=8, tolerance=1e-3)
    assert rep.passed, rep


def test_lm_gradient_reaches_generator(scenes):
    models = build_models(0, TINY_V, TINY_G)
    with torch.no_grad():
        models.generator.out_w.normal_(0, 0.05)
    batch = make_batch(models, scenes, [scenes[0].id])
    t = total_loss(models, batch, TrainConfig(beta=0.0))
    g = torch.autograd.grad(t.total, [models.generator.enc1[0].w])[0]
    assert float(g.abs().sum()) > 0
    t = total_loss(models, batch, TrainConfig(ablation="two_stage"), stage=2)
    assert torch.autograd.grad(t.total, [models.generator.enc1[0].w], allow_unused=True)[0] is None


def test_overfit_fixed_batch(scenes):
    torch.manual_seed(0)
    models = build_models(0, TINY_V, TINY_G)
    batch = make_batch(models, scenes, [scenes[2].id])
    params = list(models.victim.parameters()) + list(models.generator.parameters())
    opt = torch.optim.AdamW(params, lr=3e-3, weight_decay=0.0)
    cfg = TrainConfig()
    first = None
    for _ in range(200):
        t = total_loss(models, batch, cfg)
        first = first if first is not None else float(t.total.detach())
        opt.zero_grad()
        t.total.backward()
        opt.step()
    assert float(t.total.detach()) < 0.1 * first


def test_single_sample_overfit_decodes_target(scenes):
    torch.manual_seed(0)
    models = build_models(0, TINY_V, TINY_G)
    batch = make_batch(models, scenes, [], n=1)
    opt = torch.optim.AdamW(models.victim.parameters(), lr=3e-3, weight_decay=0.0)
    for _ in range(150):
        t = total_loss(models, batch, TrainConfig())
        opt.zero_grad()
        t.total.backward()
        opt.step()
    models.victim.eval()
    out = models.victim.greedy_decode(batch["images"], batch["query"])[0]
    n = int(batch["mask"][0].sum())
    assert out == batch["targets"][0, : n - 1].tolist()


def test_training_is_bit_deterministic(scenes, tmp_path):
    cfg = TrainConfig.toy(max_steps=6, batch_size=4, checkpoint_every=3)
    ids = plan_poison(scenes, 0.25, 0).selected
    a = train(cfg, scenes, ids, run_dir=tmp_path / "a", victim_config=TINY_V, generator_config=TINY_G, log_every=0)
    b = train(cfg, scenes, ids, run_dir=tmp_path / "b", victim_config=TINY_V, generator_config=TINY_G, log_every=0)
    assert (tmp_path / "a/checkpoints/final.bin").read_bytes() == (tmp_path / "b/checkpoints/final.bin").read_bytes()
    assert (tmp_path / "a/runlog.csv").read_bytes() == (tmp_path / "b/runlog.csv").read_bytes()
    assert sorted(p.name for p in (tmp_path / "a/checkpoints").iterdir()) == \
        ["final.bin", "step_000003.bin", "step_000006.bin"]
    log = RunLog.read_csv(tmp_path / "a/runlog.csv")
    assert [r[0] for r in log.rows] == list(range(1, 7))
    assert log.rows == a[1].rows
    state = checkpoint.load(tmp_path / "a/checkpoints/final.bin")
    assert any(k.startswith("generator.") for k in state) and any(k.startswith("victim.") for k in state)


def test_two_stage_freezes_in_turn(scenes):
    cfg = TrainConfig.toy(max_steps=4, batch_size=8, ablation="two_stage", stage1_fraction=0.5)
    ids = plan_poison(scenes, 0.5, 0).selected
    init = build_models(cfg.seed, TINY_V, TINY_G)
    models, _ = train(cfg, scenes, ids, victim_config=TINY_V, generator_config=TINY_G, log_every=0)
    changed = lambda a, b: any(not torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))  # noqa: E731
    assert changed(init.generator, models.generator)
    assert changed(init.victim, models.victim)


def test_gradient_clip_bounds_first_update(scenes):
    # a huge clip never binds; a tiny one rescales every gradient and shifts Adam through eps
    ids = plan_poison(scenes, 0.25, 0).selected
    kw = dict(victim_config=TINY_V, generator_config=TINY_G, log_every=0)
    free, _ = train(TrainConfig.toy(max_steps=3, batch_size=4, max_grad_norm=None), scenes, ids, **kw)
    same, _ = train(TrainConfig.toy(max_steps=3, batch_size=4, max_grad_norm=1e6), scenes, ids, **kw)
    tight, _ = train(TrainConfig.toy(max_steps=3, batch_size=4, max_grad_norm=1e-3), scenes, ids, **kw)
    assert all(torch.equal(a, b) for a, b in zip(free.victim.parameters(), same.victim.parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(free.victim.parameters(), tight.victim.parameters()))


@pytest.mark.parametrize("mode", ["no_lm_loss", "two_stage", "trigger_only"])
def test_ablations_survive_clean_only_batches(scenes, mode):
    # one poisoned scene in 40 leaves most batches without a poisoned record
    ids = plan_poison(scenes, 0.05, 0).selected[:1]
    cfg = TrainConfig.toy(max_steps=6, batch_size=4, ablation=mode)
    _, log = train(cfg, scenes, ids, victim_config=TINY_V, generator_config=TINY_G, log_every=0)
    assert len(log.rows) == 6
