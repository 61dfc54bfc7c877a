import numpy as np
import pytest
from scipy.stats import ortho_group

from iag.defenselab import (
    Beatrix, FeatureMatrix, SpectralSignature, defend_and_rescore, detection_report, gram_features,
)


def planted(seed, n=100, k=5, d=16, shift=8.0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    idx = rng.choice(n, size=k, replace=False)
    X[idx] += shift * direction
    return X, set(idx.tolist())


def tight_class(seed, n=30, t=4, d=6, factor=10.0):
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((1, t, d))
    X = base + 0.05 * rng.standard_normal((n, t, d))
    out = int(rng.integers(n))
    X[out] *= factor
    return X, out


def test_spectral_recovers_planted_spike():
    recovered = 0
    for seed in range(20):
        X, truth = planted(seed)
        det = SpectralSignature(0.05).fit(X)
        recovered += len(truth & set(det.flagged_.tolist()))
    assert recovered / (20 * 5) >= 0.95


def test_spectral_counts_and_degenerate():
    X, _ = planted(0)
    assert len(SpectralSignature(0.1).fit(X).flagged_) == 10
    same = np.ones((20, 4))
    det = SpectralSignature(0.1).fit(same)
    assert len(det.flagged_) == 0
    assert (det.predict() == 1).all()
    with pytest.raises(ValueError):
        SpectralSignature(0.0).fit(X)


def test_spectral_invariances():
    X, _ = planted(3)
    base = SpectralSignature(0.05).fit(X)
    shifted = SpectralSignature(0.05).fit(X + 7.5)
    assert np.allclose(base.scores_, shifted.scores_)
    Q = ortho_group.rvs(16, random_state=1)
    rotated = SpectralSignature(0.05).fit(X @ Q)
    assert np.allclose(base.scores_, rotated.scores_)
    assert set(base.flagged_) == set(rotated.flagged_)
    assert base.get_params() == {"removal_fraction": 0.05}


def test_beatrix_identical_class_flags_nothing():
    X = np.tile(np.arange(12.0).reshape(1, 3, 4), (10, 1, 1))
    det = Beatrix().fit(X, np.zeros(10))
    assert len(det.flagged_) == 0
    assert np.allclose(det.deviation_, 0)


def test_beatrix_finds_scaled_outlier():
    hits = 0
    for seed in range(20):
        X, out = tight_class(seed)
        det = Beatrix().fit(X, ["a"] * len(X))
        hits += det.flagged_.tolist() == [out]
    assert hits >= 19


def test_beatrix_partition_invariance():
    X, _ = tight_class(2, n=40)
    y = np.array([0, 1] * 20)
    a = Beatrix().fit(X, y)
    b = Beatrix().fit(X, np.where(y == 0, "cat", "dog"))
    assert a.flagged_.tolist() == b.flagged_.tolist()


def test_beatrix_skips_singletons(caplog):
    X, _ = tight_class(0, n=10)
    y = ["a"] * 9 + ["b"]
    det = Beatrix().fit(X, y)
    assert det.skipped_classes_ == ["b"]
    assert 9 not in det.flagged_


def test_gram_features_first_order_diagonal():
    X = np.random.default_rng(0).standard_normal((3, 5, 2))
    g = gram_features(X, 1)
    assert g.shape == (3, 3)
    assert np.allclose(g[:, 0], (X[:, :, 0] ** 2).mean(axis=1))


def test_detection_report_precision_recall(tmp_path):
    X, truth = planted(4)
    fm = FeatureMatrix(X, [f"s{i}" for i in range(len(X))])
    rep = detection_report(SpectralSignature(0.05), fm, poisoned_ids=[f"s{i}" for i in truth])
    assert rep.precision == 1.0 and rep.recall == 1.0
    rep.write(tmp_path / "d.json")
    assert '"flagged"' in (tmp_path / "d.json").read_text()
    with pytest.raises(ValueError):
        FeatureMatrix(np.array([[np.nan, 1.0], [0, 0]]), ["a", "b"])


def test_defend_and_rescore_contract():
    calls = []
    before = object()
    assert defend_and_rescore(["a", "b"], [], before, calls.append) == (before, before)
    assert calls == []
    _, after = defend_and_rescore(["a", "b", "c"], ["b"], before, lambda kept: kept)
    assert after == ["a", "c"]
    with pytest.raises(ValueError):
        defend_and_rescore(["a"], ["a"], before, lambda kept: kept)
