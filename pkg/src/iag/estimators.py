"""Scikit-learn style front end to the attack.

``IAGAttack`` bundles poison selection and joint training behind ``fit`` and
exposes the trained pair through ``transform`` (poison images toward a target),
``predict`` (ground queries) and ``score`` (ASR@0.5 / BA@0.5 on scenes).
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .groundeval import evaluate
from .jointtrain import ABLATIONS, Batcher, TrainConfig, train
from .poisoncraft import eval_records, plan_poison
from .scenegen import SceneSample
from .victim import VictimConfig


def check_images(images, image_size: int | None = None) -> torch.Tensor:
    """Coerce images to a float (N, 3, H, W) tensor in [0, 1].

    Accepts uint8 arrays in HWC or NHWC layout (scaled by 1/255) and float
    arrays or tensors already in NCHW layout.
    """
    if isinstance(images, torch.Tensor):
        t = images.detach().to(torch.get_default_dtype())
    else:
        arr = np.asarray(images)
        if arr.dtype == np.uint8:
            if arr.ndim == 3:
                arr = arr[None]
            if arr.ndim != 4 or arr.shape[-1] != 3:
                raise ValueError(f"uint8 images must be (N, H, W, 3), got {arr.shape}")
            arr = arr.transpose(0, 3, 1, 2).astype(np.float64) / 255.0
        t = torch.from_numpy(np.ascontiguousarray(arr)).to(torch.get_default_dtype())
    if t.dim() == 3:
        t = t[None]
    if t.dim() != 4 or t.shape[1] != 3:
        raise ValueError(f"images must be (N, 3, H, W), got {tuple(t.shape)}")
    if image_size is not None and t.shape[2:] != (image_size, image_size):
        raise ValueError(f"expected {image_size}x{image_size} images, got {tuple(t.shape[2:])}")
    if not torch.isfinite(t).all() or t.min() < 0 or t.max() > 1:
        raise ValueError("image values must be finite and lie in [0, 1]")
    return t


def check_scenes(scenes) -> list[SceneSample]:
    scenes = list(scenes)
    if not scenes:
        raise ValueError("no scenes given")
    bad = [type(s).__name__ for s in scenes if not isinstance(s, SceneSample)]
    if bad:
        raise TypeError(f"expected SceneSample items, got {bad[0]}")
    sizes = {s.image.shape for s in scenes}
    if len(sizes) != 1:
        raise ValueError(f"scenes have mixed image shapes {sorted(sizes)}")
    return scenes


def _check_texts(texts, n: int, name: str) -> list[str]:
    if isinstance(texts, str):
        texts = [texts] * n
    texts = list(texts)
    if len(texts) != n:
        raise ValueError(f"{name}: expected {n} entries, got {len(texts)}")
    return texts


class IAGAttack(BaseEstimator):
    """Poison a scene set at rate ``alpha`` and jointly train generator and victim.

    Hyper-parameters mirror :class:`TrainConfig`; defaults are the toy preset.
    After ``fit`` the trained bundle lives in ``models_``, the poisoned scene
    ids in ``poisoned_ids_`` and the per-step losses in ``runlog_``.
    """

    def __init__(self, alpha=0.05, beta=0.5, lr=3e-4, batch_size=16, max_steps=5000,
                 warmup_ratio=0.03, weight_decay=0.01, ablation="none", budget=None,
                 seed=0, d_model=128, n_layers=4, n_heads=4, max_grad_norm=1.0):
        self.alpha = alpha
        self.beta = beta
        self.lr = lr
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.warmup_ratio = warmup_ratio
        self.weight_decay = weight_decay
        self.ablation = ablation
        self.budget = budget
        self.seed = seed
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.max_grad_norm = max_grad_norm

    def _train_config(self) -> TrainConfig:
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        cfg = TrainConfig(
            beta=self.beta, lr=self.lr, batch_size=self.batch_size, max_steps=self.max_steps,
            warmup_ratio=self.warmup_ratio, weight_decay=self.weight_decay, seed=self.seed,
            ablation=self.ablation, budget=self.budget, max_grad_norm=self.max_grad_norm,
        )
        cfg.validate()
        return cfg

    def fit(self, scenes, y=None, poisoned_ids: Sequence[str] | None = None):
        """Train on ``scenes``; ``poisoned_ids`` overrides the random selection."""
        scenes = check_scenes(scenes)
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        cfg = self._train_config()
        if poisoned_ids is None:
            poisoned_ids = plan_poison(scenes, self.alpha, self.seed).selected
        known = {s.id for s in scenes}
        missing = [p for p in poisoned_ids if p not in known]
        if missing:
            raise ValueError(f"poisoned ids not among the scenes: {missing[:3]}")
        self.image_size_ = scenes[0].height
        vcfg = VictimConfig(image_size=self.image_size_, d_model=self.d_model,
                            n_layers=self.n_layers, n_heads=self.n_heads)
        self.poisoned_ids_ = list(poisoned_ids)
        self.models_, self.runlog_ = train(cfg, scenes, self.poisoned_ids_, victim_config=vcfg)
        return self

    def transform(self, images, targets) -> torch.Tensor:
        """Poisoned images steering the victim toward ``targets`` (one per image, or one for all)."""
        check_is_fitted(self, "models_")
        x = check_images(images, self.image_size_)
        targets = _check_texts(targets, x.shape[0], "targets")
        vocab = self.models_.vocab
        with torch.no_grad():
            out, _ = self.models_.poison(
                x, [vocab.tokenize(t) for t in targets],
                trigger_only=self.ablation == "trigger_only", budget=self.budget,
            )
        return out

    def predict(self, images, queries) -> list[tuple | None]:
        """Normalized boxes the victim emits for ``queries``; None when unparseable."""
        check_is_fitted(self, "models_")
        x = check_images(images, self.image_size_)
        queries = _check_texts(queries, x.shape[0], "queries")
        victim = self.models_.victim
        vocab = self.models_.vocab
        q = victim.encode_query([vocab.tokenize(f"Q: {t} <object>.") for t in queries])
        return [victim.parse(toks) for toks in victim.greedy_decode(x, q)]

    def score(self, scenes, y=None, seed: int = 0) -> float:
        """ASR@0.5 on poisoned triplets built from ``scenes`` (percent)."""
        return self.evaluate(scenes, seed=seed).asr

    def evaluate(self, scenes, seed: int = 0, clean_model=None):
        check_is_fitted(self, "models_")
        scenes = check_scenes(scenes)
        batcher = Batcher(self.models_.vocab, scenes)
        clean = getattr(clean_model, "models_", clean_model)
        report, _ = evaluate(
            self.models_, batcher, eval_records(scenes, seed, False), eval_records(scenes, seed, True),
            clean, trigger_only=self.ablation == "trigger_only", budget=self.budget,
        )
        return report
