"""Grounding metrics (IoU, ASR@0.5, BA@0.5, CA@0.5), batched inference over
record sets, transfer matrices, poison-rate sweeps and inference timing."""
from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .poisoncraft import GroundingRecord, serialize_prompt

ATTACK_TARGET, GROUND_TRUTH = "attack_target", "ground_truth"
BACKDOORED, CLEAN = "backdoored", "clean"


class EmptyDenominator(ValueError):
    pass


def iou(a, b) -> float:
    """Intersection over union of two (x0, y0, x1, y1) boxes; 0 when the union is empty."""
    if a[0] > a[2] or a[1] > a[3] or b[0] > b[2] or b[1] > b[3]:
        raise ValueError(f"unordered box in iou({tuple(a)}, {tuple(b)})")
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


@dataclass(frozen=True)
class EvalRecord:
    record_id: str
    predicted: tuple | None
    reference: tuple
    reference_kind: str
    model_kind: str

    def iou(self) -> float:
        return 0.0 if self.predicted is None else iou(self.predicted, self.reference)


@dataclass
class MetricsReport:
    asr: float | None = None
    ba: float | None = None
    ca: float | None = None
    counts: dict[str, tuple[int, int]] = field(default_factory=dict)
    malformed_rate: float = 0.0
    threshold: float = 0.5

    def as_rows(self) -> list[tuple[str, float | None, int, int]]:
        rows = []
        for key, label in (("asr", "ASR@0.5"), ("ba", "BA@0.5"), ("ca", "CA@0.5")):
            num, den = self.counts.get(key, (0, 0))
            rows.append((label, getattr(self, key), num, den))
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("metric", "value", "numerator", "denominator"))
            for label, value, num, den in self.as_rows():
                w.writerow((label, "" if value is None else f"{value:.2f}", num, den))

    def table(self, title: str = "") -> str:
        def fmt(v):
            return "  n/a" if v is None else f"{v:5.1f}"
        head = f"{'':<14}| ASR@0.5 | BA@0.5 | CA@0.5"
        line = f"{title:<14}|  {fmt(self.asr)}  | {fmt(self.ba)}  | {fmt(self.ca)}"
        return f"{head}\n{'-' * len(head)}\n{line}\n"

    def to_json(self) -> dict:
        return {
            "ASR@0.5": self.asr, "BA@0.5": self.ba, "CA@0.5": self.ca,
            "counts": {k: list(v) for k, v in self.counts.items()},
            "malformed_rate": self.malformed_rate, "threshold": self.threshold,
        }


def score(records: Sequence[EvalRecord], threshold: float = 0.5,
          require: Sequence[str] = ()) -> MetricsReport:
    """Hit rate (IoU strictly above ``threshold``) per population, as percentages.

    ASR: backdoored model vs attack-target boxes. BA: backdoored model vs
    ground truth. CA: clean model vs ground truth. Malformed predictions count
    as IoU 0. Metrics named in ``require`` raise if their population is empty.
    """
    if not records:
        raise ValueError("no records to score")
    groups = {
        "asr": (BACKDOORED, ATTACK_TARGET),
        "ba": (BACKDOORED, GROUND_TRUTH),
        "ca": (CLEAN, GROUND_TRUTH),
    }
    report = MetricsReport(threshold=threshold)
    for key, (model_kind, ref_kind) in groups.items():
        pop = [r for r in records if r.model_kind == model_kind and r.reference_kind == ref_kind]
        if not pop:
            if key in require:
                raise EmptyDenominator(f"no records for {key.upper()}@{threshold}")
            continue
        hits = sum(r.iou() > threshold for r in pop)
        report.counts[key] = (hits, len(pop))
        setattr(report, key, 100.0 * hits / len(pop))
    report.malformed_rate = 100.0 * sum(r.predicted is None for r in records) / len(records)
    return report


# -- inference ---------------------------------------------------------------

@dataclass
class Transcript:
    record_id: str
    output_text: str
    parsed_bbox: tuple | None

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "output_text": self.output_text,
            "parsed_bbox": list(self.parsed_bbox) if self.parsed_bbox else None,
        }


def record_id(record: GroundingRecord) -> str:
    kind = "p" if record.is_poisoned else "c"
    return f"{record.scene_id}:{kind}"


def run_inference(models, batcher, records: Sequence[GroundingRecord], *, with_trigger: bool,
                  trigger_only: bool = False, budget=None, batch_size: int = 100,
                  temperature: float = 0.0, seed: int = 0) -> list[Transcript]:
    """Decode every record; with ``with_trigger`` the generator poisons the
    image toward the record's attack target first."""
    gen = torch.Generator().manual_seed(seed) if temperature > 0 else None
    out: list[Transcript] = []
    victim = models.victim
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            idx = torch.tensor([batcher.index[r.scene_id] for r in chunk], dtype=torch.long)
            images = batcher.images[idx]
            if with_trigger:
                targets = [batcher.tokens(r.attack_target_desc) for r in chunk]
                images, _ = models.poison(images, targets, trigger_only=trigger_only, budget=budget)
            query = victim.encode_query([batcher.query_tokens(r) for r in chunk])
            decoded = victim.greedy_decode(images, query, temperature=temperature, generator=gen)
            for r, toks in zip(chunk, decoded):
                out.append(Transcript(record_id(r), victim.vocab.detokenize(toks), victim.parse(toks)))
    return out


def eval_records_for(transcripts: Sequence[Transcript], records: Sequence[GroundingRecord], *,
                     reference_kind: str, model_kind: str) -> list[EvalRecord]:
    out = []
    for t, r in zip(transcripts, records):
        ref = r.answer_bbox_norm if reference_kind == ATTACK_TARGET else r.query_bbox_norm
        out.append(EvalRecord(t.record_id, t.parsed_bbox, tuple(ref), reference_kind, model_kind))
    return out


def evaluate(backdoored, batcher, clean_records, poison_records, clean_model=None, *,
             trigger_only: bool = False, budget=None, batch_size: int = 100):
    """Full metric set; returns (MetricsReport, transcripts by population)."""
    transcripts = {}
    evals: list[EvalRecord] = []
    t = run_inference(backdoored, batcher, poison_records, with_trigger=True,
                      trigger_only=trigger_only, budget=budget, batch_size=batch_size)
    transcripts["asr"] = t
    evals += eval_records_for(t, poison_records, reference_kind=ATTACK_TARGET, model_kind=BACKDOORED)
    t = run_inference(backdoored, batcher, clean_records, with_trigger=False, batch_size=batch_size)
    transcripts["ba"] = t
    evals += eval_records_for(t, clean_records, reference_kind=GROUND_TRUTH, model_kind=BACKDOORED)
    if clean_model is not None:
        t = run_inference(clean_model, batcher, clean_records, with_trigger=False, batch_size=batch_size)
        transcripts["ca"] = t
        evals += eval_records_for(t, clean_records, reference_kind=GROUND_TRUTH, model_kind=CLEAN)
    return score(evals), transcripts


def write_transcripts(path, transcripts: Sequence[Transcript]) -> None:
    Path(path).write_text("".join(json.dumps(t.to_json(), sort_keys=True) + "\n" for t in transcripts))


# -- experiment drivers ------------------------------------------------------

def transfer_eval(train_runs: dict[str, object], eval_sets: dict[str, Callable[[object], float]]):
    """ASR matrix: rows are training sets, columns are evaluation sets.

    ``train_runs`` maps a training-set name to a trained model bundle;
    ``eval_sets`` maps an eval-set name to a callable scoring a bundle's ASR.
    Vocabulary mismatches between bundles raise before anything is scored.
    """
    digests = {name: run.vocab.digest() for name, run in train_runs.items()}
    if len(set(digests.values())) > 1:
        raise ValueError(f"vocabulary mismatch across training runs: {digests}")
    rows = list(train_runs)
    cols = list(eval_sets)
    mat = np.zeros((len(rows), len(cols)))
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            mat[i, j] = eval_sets[c](train_runs[r])
    return rows, cols, mat


def poison_sweep(rates: Sequence[float], run_one: Callable[[float], MetricsReport]) -> dict[float, MetricsReport]:
    """Independent train+eval per poison rate, in ascending rate order."""
    if any(not 0 <= r <= 1 for r in rates):
        raise ValueError("poison rates must lie in [0, 1]")
    return {r: run_one(r) for r in sorted(rates)}


@dataclass
class TimingReport:
    n: int
    clean_decode: list[float]
    poisoned_decode: list[float]
    trigger_generation: list[float]

    @staticmethod
    def _stats(xs):
        return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else 0.0)

    def summary(self) -> dict:
        out = {"n": self.n}
        for key in ("clean_decode", "poisoned_decode", "trigger_generation"):
            m, s = self._stats(getattr(self, key))
            out[key] = {"mean_ms": 1e3 * m, "std_ms": 1e3 * s}
        return out


def timing(models, batcher, records: Sequence[GroundingRecord], n: int = 10) -> TimingReport:
    """Wall-clock per single-record decode, without and with a trigger.

    Trigger generation is timed on its own; ``poisoned_decode`` covers only the
    victim decode of the already-poisoned image, so the attack overhead is the
    generation time.
    """
    if n < 2:
        raise ValueError("timing needs at least 2 repetitions")
    picks = _similar_length(records, n)
    victim = models.victim
    clean_t, pois_t, gen_t = [], [], []
    with torch.no_grad():
        for r in picks:
            idx = torch.tensor([batcher.index[r.scene_id]])
            image = batcher.images[idx]
            query = victim.encode_query([batcher.query_tokens(r)])
            t0 = time.perf_counter()
            victim.greedy_decode(image, query)
            clean_t.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            poisoned, _ = models.poison(image, [batcher.tokens(r.attack_target_desc)])
            gen_t.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            victim.greedy_decode(poisoned, query)
            pois_t.append(time.perf_counter() - t0)
    return TimingReport(n, clean_t, pois_t, gen_t)


def _similar_length(records, n):
    """``n`` poisoned records whose prompts share the most common token length."""
    pool = [r for r in records if r.is_poisoned]
    if not pool:
        raise ValueError("timing needs records with attack targets")
    lengths = [len(serialize_prompt(r)[0].split()) for r in pool]
    common = max(set(lengths), key=lengths.count)
    same = [r for r, k in zip(pool, lengths) if k == common]
    return [same[i % len(same)] for i in range(n)]
