"""Attack data preparation: candidate scenes, poison sampling, triplets and
prompt serialization.

A scene is either poisoned or clean for the whole run; which object is
queried (and, when poisoned, which one is the attack target) is re-drawn
per epoch from a seed derived from ``(seed, epoch, scene id)``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .scenegen import SceneSample, normalize_bbox, scene_to_json

log = logging.getLogger(__name__)

_ANSWER_RE = re.compile(r"^<([^<>]+)>\[(\d+),(\d+),(\d+),(\d+)\]$")


@dataclass(frozen=True)
class GroundingRecord:
    scene_id: str
    query_text: str
    answer_desc: str
    answer_bbox_norm: tuple[int, int, int, int]
    is_poisoned: bool = False
    attack_target_desc: str | None = None
    query_bbox_norm: tuple[int, int, int, int] | None = None

    def __post_init__(self):
        if self.is_poisoned:
            if not self.attack_target_desc or self.attack_target_desc == self.query_text:
                raise ValueError(f"{self.scene_id}: poisoned record needs a target distinct from the query")
        elif self.attack_target_desc is not None:
            raise ValueError(f"{self.scene_id}: clean record carries an attack target")


@dataclass
class PoisonPlan:
    candidates: list[str]
    alpha: float
    selected: list[str]
    seed: int


def derive_seed(*parts) -> int:
    blob = "\x1f".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def build_candidate_set(scenes: Sequence[SceneSample]) -> list[str]:
    """Ids of scenes with at least two annotated objects."""
    if not scenes:
        raise ValueError("empty manifest")
    cands = [s.id for s in scenes if len(s.objects) >= 2]
    if not cands:
        log.warning("no scene has two or more objects; candidate set is empty")
    return cands


def poison_count(alpha: float, n: int) -> int:
    return math.floor(alpha * n + 0.5)


def select_poison(candidates: Sequence[str], alpha: float, seed: int) -> list[str]:
    """Uniform sample of round(alpha*|C|) ids without replacement, in input order."""
    if not 0 <= alpha <= 1:
        raise ValueError(f"poison rate must lie in [0, 1], got {alpha}")
    k = poison_count(alpha, len(candidates))
    if k == 0:
        return []
    rng = np.random.default_rng(seed)
    picked = set(rng.choice(len(candidates), size=k, replace=False).tolist())
    return [c for i, c in enumerate(candidates) if i in picked]


def plan_poison(scenes: Sequence[SceneSample], alpha: float, seed: int) -> PoisonPlan:
    cands = build_candidate_set(scenes)
    return PoisonPlan(cands, alpha, select_poison(cands, alpha, seed), seed)


def _norm(scene: SceneSample, obj):
    return normalize_bbox(obj.bbox_px, scene.width, scene.height)


def make_triplet(scene: SceneSample, seed: int) -> GroundingRecord:
    """Poisoned record: random attack target, query drawn from the other objects."""
    if len(scene.objects) < 2:
        raise ValueError(f"{scene.id}: need at least 2 objects to poison")
    rng = np.random.default_rng(seed)
    t = int(rng.integers(len(scene.objects)))
    others = [i for i in range(len(scene.objects)) if i != t]
    q = others[int(rng.integers(len(others)))]
    target, query = scene.objects[t], scene.objects[q]
    return GroundingRecord(
        scene.id, query.description, target.description, _norm(scene, target),
        True, target.description, _norm(scene, query),
    )


def make_clean_record(scene: SceneSample, seed: int) -> GroundingRecord:
    if not scene.objects:
        raise ValueError(f"{scene.id}: scene has no objects")
    rng = np.random.default_rng(seed)
    obj = scene.objects[int(rng.integers(len(scene.objects)))]
    box = _norm(scene, obj)
    return GroundingRecord(scene.id, obj.description, obj.description, box, False, None, box)


def build_records(scenes: Sequence[SceneSample], poisoned_ids: Iterable[str], seed: int,
                  epoch: int = 0) -> list[GroundingRecord]:
    """One record per scene, ordered like ``scenes``."""
    poisoned = set(poisoned_ids)
    out = []
    for s in scenes:
        rs = derive_seed(seed, epoch, s.id)
        out.append(make_triplet(s, rs) if s.id in poisoned else make_clean_record(s, rs))
    return out


def eval_records(scenes: Sequence[SceneSample], seed: int, poisoned: bool) -> list[GroundingRecord]:
    """Evaluation set: every multi-object scene as a triplet, or every scene clean."""
    if poisoned:
        return [make_triplet(s, derive_seed(seed, "eval", s.id)) for s in scenes if len(s.objects) >= 2]
    return [make_clean_record(s, derive_seed(seed, "eval", s.id)) for s in scenes]


# -- prompt template --------------------------------------------------------

def serialize_prompt(record: GroundingRecord) -> tuple[str, str]:
    x0, y0, x1, y1 = record.answer_bbox_norm
    return f"Q: {record.query_text} <object>.", f"<{record.answer_desc}>[{x0},{y0},{x1},{y1}]"


def parse_answer(text: str):
    """``<desc>[x0,y0,x1,y1]`` -> (desc, bbox); None if the text does not match."""
    m = _ANSWER_RE.match(text.strip())
    if not m:
        return None
    return m.group(1), tuple(int(v) for v in m.groups()[1:])


# -- manifests ----------------------------------------------------------------

def record_to_json(record: GroundingRecord, scene: SceneSample) -> dict:
    row = scene_to_json(scene, f"images/{scene.id}.ppm")
    row.update(
        query=record.query_text,
        answer_desc=record.answer_desc,
        answer_bbox=list(record.answer_bbox_norm),
        query_bbox=list(record.query_bbox_norm) if record.query_bbox_norm else None,
        poisoned=record.is_poisoned,
        target_desc=record.attack_target_desc,
    )
    return row


def record_from_json(row: dict) -> GroundingRecord:
    return GroundingRecord(
        row["id"], row["query"], row["answer_desc"], tuple(row["answer_bbox"]),
        bool(row["poisoned"]), row.get("target_desc"),
        tuple(row["query_bbox"]) if row.get("query_bbox") else None,
    )


def write_records(path, records: Sequence[GroundingRecord], scenes_by_id: dict) -> None:
    lines = [json.dumps(record_to_json(r, scenes_by_id[r.scene_id]), sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_records(path) -> list[GroundingRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(record_from_json(json.loads(line)))
    return out


def plan_to_json(plan: PoisonPlan) -> dict:
    return asdict(plan)
