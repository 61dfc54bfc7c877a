import numpy as np
import pytest
import torch
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from iag.estimators import IAGAttack, check_images, check_scenes
from iag.scenegen import SceneConfig, generate_dataset

TINY = dict(max_steps=3, batch_size=4, d_model=16, n_layers=1, n_heads=2)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(SceneConfig(counts={"train": 20, "val": 4}))


def test_check_images():
    u8 = np.full((2, 8, 8, 3), 255, np.uint8)
    t = check_images(u8)
    assert t.shape == (2, 3, 8, 8) and float(t.max()) == 1.0
    assert check_images(u8[0]).shape == (1, 3, 8, 8)
    with pytest.raises(ValueError):
        check_images(np.full((1, 3, 8, 8), 2.0))
    with pytest.raises(ValueError):
        check_images(torch.zeros(1, 3, 8, 8), image_size=64)
    with pytest.raises(ValueError):
        check_images(np.zeros((1, 4, 8, 8), np.float32))


def test_check_scenes(data):
    assert len(check_scenes(data.split("val"))) == 4
    with pytest.raises(ValueError):
        check_scenes([])
    with pytest.raises(TypeError):
        check_scenes([1])


def test_params_round_trip():
    est = IAGAttack(alpha=0.1, ablation="two_stage")
    params = est.get_params()
    assert params["alpha"] == 0.1 and params["ablation"] == "two_stage"
    assert clone(est).get_params() == params
    assert est.set_params(beta=0.0).beta == 0.0


def test_fit_transform_predict(data):
    est = IAGAttack(alpha=0.5, **TINY)
    with pytest.raises(NotFittedError):
        est.predict(data.split("val")[0].image, "small red circle")
    est.fit(data.split("train"))
    assert len(est.poisoned_ids_) == 10
    assert len(est.runlog_.rows) == 3
    val = data.split("val")
    imgs = np.stack([s.image for s in val])
    out = est.transform(imgs, val[0].objects[0].description)
    assert out.shape == (4, 3, 64, 64)
    assert float(out.min()) >= 0 and float(out.max()) <= 1
    preds = est.predict(imgs, [s.objects[0].description for s in val])
    assert len(preds) == 4
    rep = est.evaluate(val)
    assert rep.counts["asr"][1] == 4
    assert 0 <= est.score(val) <= 100
    with pytest.raises(ValueError):
        est.predict(imgs, ["small red circle"])


def test_fit_rejects_bad_input(data):
    with pytest.raises(ValueError):
        IAGAttack(alpha=2.0, **TINY).fit(data.split("train"))
    with pytest.raises(ValueError):
        IAGAttack(ablation="x", **TINY).fit(data.split("train"))
    with pytest.raises(ValueError):
        IAGAttack(**TINY).fit(data.split("train"), poisoned_ids=["nope"])
