from fractions import Fraction

import numpy as np
import pytest

from iag.groundeval import (
    ATTACK_TARGET, BACKDOORED, CLEAN, GROUND_TRUTH, EmptyDenominator, EvalRecord, TimingReport,
    iou, poison_sweep, score, transfer_eval,
)
from iag.vocab import Vocab


def grid_iou(a, b):
    """Brute-force IoU by counting unit cells on the integer lattice."""
    lo = min(a[0], b[0]), min(a[1], b[1])
    hi = max(a[2], b[2]), max(a[3], b[3])
    xs = np.arange(lo[0], hi[0])[None, :]
    ys = np.arange(lo[1], hi[1])[:, None]
    ina = (xs >= a[0]) & (xs < a[2]) & (ys >= a[1]) & (ys < a[3])
    inb = (xs >= b[0]) & (xs < b[2]) & (ys >= b[1]) & (ys < b[3])
    union = int((ina | inb).sum())
    return Fraction(int((ina & inb).sum()), union) if union else Fraction(0)


def test_iou_examples():
    assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert iou((0, 0, 10, 10), (20, 20, 30, 30)) == 0.0
    assert iou((0, 0, 10, 10), (5, 5, 15, 15)) == pytest.approx(1 / 7, abs=1e-15)
    assert iou((0, 0, 10, 10), (10, 0, 20, 10)) == 0.0
    assert iou((3, 3, 3, 3), (3, 3, 3, 3)) == 0.0
    with pytest.raises(ValueError):
        iou((5, 0, 1, 1), (0, 0, 1, 1))


def test_iou_matches_pixel_grid():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        a = rng.integers(0, 40, size=4)
        b = rng.integers(0, 40, size=4)
        a = (min(a[0], a[2]), min(a[1], a[3]), max(a[0], a[2]), max(a[1], a[3]))
        b = (min(b[0], b[2]), min(b[1], b[3]), max(b[0], b[2]), max(b[1], b[3]))
        assert abs(iou(a, b) - float(grid_iou(a, b))) <= 1e-9


def rec(pred, ref, kind=GROUND_TRUTH, model=BACKDOORED, rid="r"):
    return EvalRecord(rid, pred, ref, kind, model)


def test_score_examples():
    box = (100, 100, 500, 500)
    perfect = [rec(box, box, ATTACK_TARGET), rec(box, box), rec(box, box, model=CLEAN)]
    r = score(perfect)
    assert (r.asr, r.ba, r.ca) == (100.0, 100.0, 100.0)
    broken = [rec(None, box, ATTACK_TARGET), rec(None, box), rec(None, box, model=CLEAN)]
    r = score(broken)
    assert (r.asr, r.ba, r.ca) == (0.0, 0.0, 0.0)
    assert r.malformed_rate == 100.0
    mixed = [rec(box, box), rec((100, 100, 480, 500), box), rec((0, 0, 100, 100), box), rec(None, box)]
    r = score(mixed)
    assert r.ba == 50.0 and r.counts["ba"] == (2, 4)
    assert r.asr is None and r.ca is None


def test_score_threshold_is_strict():
    ref = (0, 0, 100, 100)
    half = (0, 0, 50, 100)
    assert iou(half, ref) == 0.5
    assert score([rec(half, ref)]).ba == 0.0


def test_score_requires_population():
    with pytest.raises(EmptyDenominator):
        score([rec((0, 0, 1, 1), (0, 0, 1, 1))], require=("asr",))
    with pytest.raises(ValueError):
        score([])


def test_metrics_csv_header(tmp_path):
    r = score([rec((0, 0, 1, 1), (0, 0, 1, 1), ATTACK_TARGET), rec((0, 0, 1, 1), (0, 0, 1, 1))])
    r.write_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "metric,value,numerator,denominator"
    assert [l.split(",")[0] for l in lines[1:]] == ["ASR@0.5", "BA@0.5", "CA@0.5"]
    assert "ASR@0.5" in r.table() and "CA@0.5" in r.table()


class Bundle:
    def __init__(self, vocab):
        self.vocab = vocab


def test_transfer_matrix():
    runs = {"a": Bundle(Vocab()), "b": Bundle(Vocab())}
    evals = {"a": lambda m: 10.0 if m is runs["a"] else 1.0, "b": lambda m: 20.0 if m is runs["b"] else 2.0}
    rows, cols, mat = transfer_eval(runs, evals)
    assert mat.shape == (2, 2)
    assert mat[0, 0] == 10.0 and mat[1, 1] == 20.0
    with pytest.raises(ValueError):
        transfer_eval({"a": Bundle(Vocab()), "c": Bundle(Vocab(["red"]))}, evals)


def test_poison_sweep_orders_rates():
    seen = []
    out = poison_sweep([0.1, 0.0, 0.05], lambda r: seen.append(r) or r)
    assert seen == [0.0, 0.05, 0.1] and list(out) == seen
    with pytest.raises(ValueError):
        poison_sweep([1.5], lambda r: r)


def test_timing_summary():
    rep = TimingReport(10, [0.01] * 10, [0.02] * 10, [0.001] * 10)
    s = rep.summary()
    assert s["n"] == 10
    assert s["clean_decode"]["mean_ms"] == pytest.approx(10.0)
    assert s["clean_decode"]["std_ms"] == pytest.approx(0.0)
