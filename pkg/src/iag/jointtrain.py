"""Joint optimisation of the trigger generator and the victim.

One step: poisoned members of the batch get their image replaced in-graph by
``clamp(I + G(I, z))``; the victim is teacher-forced on every record; the
loss is ``LM_clean + LM_poison + beta * L_rec`` and one AdamW step updates
both networks, so LM gradients from the poisoned branch reach the generator
through the poisoned image.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .diffengine import AdamW, backward, checkpoint, linear_warmup, set_deterministic
from .diffengine.ops import NonFiniteError, finite_checks
from .poisoncraft import GroundingRecord, build_records, derive_seed, serialize_prompt
from .scenegen import SceneSample
from .triggergen import ConditionEncoder, GeneratorConfig, TriggerGenerator, poison_image, rec_loss
from .victim import VictimConfig, VictimModel, lm_loss
from .vocab import Vocab

log = logging.getLogger(__name__)

ABLATIONS = ("none", "trigger_only", "no_lm_loss", "two_stage")
RUNLOG_HEADER = ("step", "total", "lm_clean", "lm_poison", "rec")


class TrainingAborted(RuntimeError):
    def __init__(self, msg: str, last_good: Path | None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class TrainConfig:
    beta: float = 0.5
    lr: float = 2e-5
    batch_size: int = 128
    max_steps: int = 2000
    warmup_ratio: float = 0.03
    weight_decay: float = 0.01
    seed: int = 0
    ablation: str = "none"
    checkpoint_every: int = 0
    stage1_fraction: float = 0.2
    resample_records: bool = True
    budget: float | None = None
    max_grad_norm: float | None = None

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """Desk-scale preset: larger lr, smaller batches and a gradient clip."""
        base = dict(lr=3e-4, batch_size=16, max_steps=5000, max_grad_norm=1.0)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1 or self.max_steps < 1:
            raise ValueError("batch_size and max_steps must be positive")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be > 0")
        if self.ablation == "two_stage" and not 0 < self.stage1_fraction < 1:
            raise ValueError("stage1_fraction must lie in (0, 1)")


def apply_ablation(mode: str, config: TrainConfig) -> TrainConfig:
    """Return a copy of ``config`` running the given ablation."""
    if mode not in ABLATIONS:
        raise ValueError(f"unknown ablation {mode!r}")
    out = TrainConfig(**asdict(config))
    out.ablation = mode
    return out


@dataclass
class LossTerms:
    total: torch.Tensor
    lm_clean: torch.Tensor
    lm_poison: torch.Tensor
    rec: torch.Tensor

    def row(self, step: int) -> tuple:
        vals = (self.total, self.lm_clean, self.lm_poison, self.rec)
        return (step, *(float(v.detach()) for v in vals))


@dataclass
class RunLog:
    rows: list[tuple] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    wall_clock: float = 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RUNLOG_HEADER)
            for step, *vals in self.rows:
                w.writerow([step, *(repr(v) for v in vals)])

    @staticmethod
    def read_csv(path) -> "RunLog":
        with open(path) as fh:
            rows = [(int(r["step"]), *(float(r[k]) for k in RUNLOG_HEADER[1:])) for r in csv.DictReader(fh)]
        return RunLog(rows)

    def smoothed_total(self, alpha: float = 0.05) -> np.ndarray:
        out, acc = [], None
        for _, total, *_ in self.rows:
            acc = total if acc is None else (1 - alpha) * acc + alpha * total
            out.append(acc)
        return np.asarray(out)


class Batcher:
    """Tokenizes records against scene images; caches token lists per string."""

    def __init__(self, vocab: Vocab, scenes: Sequence[SceneSample]):
        self.vocab = vocab
        self.index = {s.id: i for i, s in enumerate(scenes)}
        imgs = np.stack([s.pixels() for s in scenes]).transpose(0, 3, 1, 2)
        self.images = torch.from_numpy(np.ascontiguousarray(imgs)).to(torch.get_default_dtype())
        self._cache: dict[str, list[int]] = {}

    def tokens(self, text: str) -> list[int]:
        ids = self._cache.get(text)
        if ids is None:
            ids = self._cache[text] = self.vocab.tokenize(text)
        return ids

    def answer_tokens(self, record: GroundingRecord) -> list[int]:
        return self.tokens(serialize_prompt(record)[1]) + [self.vocab.eos]

    def query_tokens(self, record: GroundingRecord) -> list[int]:
        return self.tokens(serialize_prompt(record)[0])

    def collate(self, victim: VictimModel, records: Sequence[GroundingRecord]) -> dict:
        idx = torch.tensor([self.index[r.scene_id] for r in records], dtype=torch.long)
        a_in, a_tgt, a_mask = victim.encode_answer([self.answer_tokens(r) for r in records])
        poisoned = torch.tensor([r.is_poisoned for r in records], dtype=torch.bool)
        return dict(
            images=self.images[idx],
            query=victim.encode_query([self.query_tokens(r) for r in records]),
            answer_in=a_in,
            targets=a_tgt,
            mask=a_mask,
            poisoned=poisoned,
            target_desc=[self.tokens(r.attack_target_desc) for r in records if r.is_poisoned],
        )


@dataclass
class Models:
    vocab: Vocab
    victim: VictimModel
    generator: TriggerGenerator
    encoder: ConditionEncoder

    def state(self) -> dict[str, torch.Tensor]:
        out = {f"victim.{k}": v for k, v in self.victim.state_dict().items()}
        out.update({f"generator.{k}": v for k, v in self.generator.state_dict().items()})
        out.update({f"encoder.{k}": v for k, v in self.encoder.state_dict().items()})
        return out

    def load_state(self, tensors: dict[str, torch.Tensor]) -> None:
        dtype = torch.get_default_dtype()
        for prefix, module in (("victim.", self.victim), ("generator.", self.generator), ("encoder.", self.encoder)):
            sub = {k[len(prefix):]: v.to(dtype) for k, v in tensors.items() if k.startswith(prefix)}
            module.load_state_dict(sub)

    def poison(self, images, target_tokens, *, trigger_only=False, budget=None):
        """Return (poisoned images, residual) for a batch of clean images."""
        cond, cmask = self.encoder.encode(target_tokens)
        residual = self.generator(images, cond, cmask)
        return poison_image(images, residual, trigger_only=trigger_only, budget=budget), residual


def build_models(seed: int, victim_config: VictimConfig | None = None,
                 generator_config: GeneratorConfig | None = None) -> Models:
    torch.manual_seed(seed)
    vocab = Vocab()
    gcfg = generator_config or GeneratorConfig()
    victim = VictimModel(vocab, victim_config)
    generator = TriggerGenerator(gcfg)
    encoder = ConditionEncoder(vocab, gcfg.d_cond, gcfg.max_cond_len, gcfg.encoder_seed)
    return Models(vocab, victim, generator, encoder)


def total_loss(models: Models, batch: dict, config: TrainConfig, stage: int = 0) -> LossTerms:
    """Loss terms for one batch.

    ``stage`` only matters for the two-stage ablation: 1 trains the generator
    on the reconstruction term alone, 2 trains the victim on the LM term with
    the generator frozen.
    """
    images, poisoned = batch["images"], batch["poisoned"]
    zero = images.new_zeros(())
    rec = zero
    model_images = images
    if bool(poisoned.any()):
        p_idx = poisoned.nonzero().squeeze(1)
        clean_p = images[p_idx]
        frozen_gen = config.ablation == "two_stage" and stage == 2
        with torch.set_grad_enabled(torch.is_grad_enabled() and not frozen_gen):
            poisoned_images, _ = models.poison(
                clean_p, batch["target_desc"],
                trigger_only=config.ablation == "trigger_only", budget=config.budget,
            )
            rec = rec_loss(poisoned_images, clean_p)
        model_images = images.index_put((p_idx,), poisoned_images)
    # the victim gets no gradient in these modes, so its forward pass is skipped
    skip_victim = config.ablation == "no_lm_loss" or (config.ablation == "two_stage" and stage == 1)
    if skip_victim:
        lm_total = lm_clean = lm_poison = zero
    else:
        logits = models.victim(model_images, batch["query"], batch["answer_in"])
        lm_total, lm_clean, lm_poison = lm_loss(logits, batch["targets"], batch["mask"], poisoned)
    if config.ablation == "no_lm_loss" or (config.ablation == "two_stage" and stage == 1):
        total = config.beta * rec
    elif config.ablation == "two_stage":
        total = lm_total
    else:
        total = lm_total + config.beta * rec
    return LossTerms(total, lm_clean, lm_poison, rec)


def _epoch_batches(records, batch_size, seed, epoch):
    order = np.random.default_rng(derive_seed(seed, "order", epoch)).permutation(len(records))
    for start in range(0, len(order), batch_size):
        yield [records[i] for i in order[start:start + batch_size]]


def _stages(config: TrainConfig):
    if config.ablation == "two_stage":
        s1 = max(1, int(round(config.max_steps * config.stage1_fraction)))
        return [(1, s1), (2, config.max_steps)]
    return [(0, config.max_steps)]


def train(config: TrainConfig, scenes: Sequence[SceneSample], poisoned_ids: Sequence[str], *,
          run_dir=None, victim_config: VictimConfig | None = None,
          generator_config: GeneratorConfig | None = None, data_seed: int | None = None,
          log_every: int = 100) -> tuple[Models, RunLog]:
    """Train from scratch; deterministic given the arguments.

    ``data_seed`` drives per-epoch record sampling (defaults to ``config.seed``).
    Checkpoints go to ``run_dir/checkpoints`` every ``checkpoint_every`` steps
    plus ``final.bin``; the run log goes to ``run_dir/runlog.csv``.
    """
    config.validate()
    set_deterministic(config.seed)
    data_seed = config.seed if data_seed is None else data_seed
    models = build_models(config.seed, victim_config, generator_config)
    batcher = Batcher(models.vocab, scenes)
    poisoned_ids = list(poisoned_ids)
    ckpt_dir = Path(run_dir) / "checkpoints" if run_dir is not None else None
    runlog = RunLog()
    last_good: Path | None = None
    t0 = time.perf_counter()

    step, epoch = 0, 0
    records = build_records(scenes, poisoned_ids, data_seed, 0)
    for stage, stage_end in _stages(config):
        if stage == 1:
            params = list(models.generator.parameters())
        elif stage == 2:
            params = list(models.victim.parameters())
        else:
            params = list(models.victim.parameters()) + list(models.generator.parameters())
        named = {f"p{i}": p for i, p in enumerate(params)}
        opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
        sched = linear_warmup(opt, stage_end - step, config.warmup_ratio)
        models.victim.train(stage != 1)
        while step < stage_end:
            for batch_records in _epoch_batches(records, config.batch_size, data_seed, epoch):
                if step >= stage_end:
                    break
                batch = batcher.collate(models.victim, batch_records)
                # loss and gradients are checked below; per-op checks are too costly here
                with finite_checks(False):
                    terms = total_loss(models, batch, config, stage)
                if not math.isfinite(float(terms.total.detach())):
                    raise TrainingAborted(f"non-finite loss at step {step}", last_good)
                grads = backward(terms.total, named)
                for name, p in named.items():
                    p.grad = grads[name]
                if config.max_grad_norm is not None:
                    torch.nn.utils.clip_grad_norm_(params, config.max_grad_norm)
                try:
                    opt.step()
                except NonFiniteError as exc:
                    raise TrainingAborted(f"step {step}: {exc}", last_good) from exc
                sched.step()
                step += 1
                runlog.rows.append(terms.row(step))
                if log_every and step % log_every == 0:
                    log.info("step %d total %.4f clean %.4f poison %.4f rec %.5f", *terms.row(step))
                if ckpt_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                    last_good = checkpoint.save(ckpt_dir / f"step_{step:06d}.bin", models.state())
                    runlog.checkpoints.append(last_good)
            else:
                epoch += 1
                if config.resample_records:
                    records = build_records(scenes, poisoned_ids, data_seed, epoch)
    for p in models.victim.parameters():
        p.grad = None
    for p in models.generator.parameters():
        p.grad = None
    models.victim.eval()
    runlog.wall_clock = time.perf_counter() - t0
    if run_dir is not None:
        final = checkpoint.save(ckpt_dir / "final.bin", models.state())
        runlog.checkpoints.append(final)
        runlog.write_csv(Path(run_dir) / "runlog.csv")
    return models, runlog


def load_models(path, seed: int = 0, victim_config=None, generator_config=None) -> Models:
    models = build_models(seed, victim_config, generator_config)
    models.load_state(checkpoint.load(path))
    models.victim.eval()
    return models


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
