import itertools
import logging

import numpy as np
import pytest

from iag.poisoncraft import (
    GroundingRecord, build_candidate_set, build_records, derive_seed, eval_records, make_clean_record,
    make_triplet, parse_answer, plan_poison, poison_count, read_records, select_poison,
    serialize_prompt, write_records,
)
from iag.scenegen import AnnotatedObject, SceneConfig, SceneSample, generate_dataset
from iag.victim import VictimModel
from iag.vocab import Vocab


def scene(n_obj, sid="s"):
    objs = [
        AnnotatedObject("circle", "red", "small", (0, 0, 16, 16)),
        AnnotatedObject("square", "blue", "large", (30, 30, 54, 54)),
        AnnotatedObject("triangle", "green", "small", (40, 0, 56, 16)),
    ][:n_obj]
    return SceneSample(sid, np.zeros((64, 64, 3), np.uint8), objs)


@pytest.fixture(scope="module")
def corpus():
    return generate_dataset(SceneConfig(counts={"train": 200, "val": 50})).split("train")


def test_candidate_set(caplog):
    scenes = [scene(1, "a"), scene(2, "b"), scene(3, "c")]
    assert build_candidate_set(scenes) == ["b", "c"]
    with caplog.at_level(logging.WARNING):
        assert build_candidate_set([scene(1, "a")]) == []
    assert "empty" in caplog.text
    with pytest.raises(ValueError):
        build_candidate_set([])


def test_candidate_set_is_whole_corpus(corpus):
    assert build_candidate_set(corpus) == [s.id for s in corpus]


def test_poison_counts():
    cands = [f"s{i}" for i in range(1000)]
    assert select_poison(cands, 0.0, 0) == []
    assert len(select_poison(cands, 0.05, 0)) == 50
    assert poison_count(0.05, 30) == 2  # 1.5 rounds up
    with pytest.raises(ValueError):
        select_poison(cands, 1.5, 0)


def test_seeds_give_different_sets():
    cands = [f"s{i}" for i in range(100)]
    differ = 0
    for k in range(100):
        a, b = select_poison(cands, 0.5, 2 * k), select_poison(cands, 0.5, 2 * k + 1)
        assert len(a) == len(b) == 50
        differ += a != b
    assert differ == 100


def test_two_object_triplets_cover_both_orders():
    s = scene(2)
    seen = set()
    for seed in range(200):
        r = make_triplet(s, seed)
        assert r.query_text != r.attack_target_desc
        seen.add((r.query_text, r.attack_target_desc))
    assert len(seen) == 2


def test_three_object_query_excludes_target():
    s = scene(3)
    for seed in range(200):
        r = make_triplet(s, seed)
        assert r.query_text in {o.description for o in s.objects} - {r.attack_target_desc}
        target = s.find(r.attack_target_desc)
        assert r.answer_bbox_norm == tuple(int(v) for v in np.round(np.array(target.bbox_px) / 64 * 1000 + 1e-9))


def test_single_object_clean_record():
    r = make_clean_record(scene(1), 0)
    assert r.query_text == r.answer_desc == "small red circle"
    assert r.query_bbox_norm == r.answer_bbox_norm
    with pytest.raises(ValueError):
        make_triplet(scene(1), 0)


def test_record_validation():
    with pytest.raises(ValueError):
        GroundingRecord("x", "red circle", "red circle", (0, 0, 1, 1), True, "red circle")
    with pytest.raises(ValueError):
        GroundingRecord("x", "red circle", "red circle", (0, 0, 1, 1), False, "blue square")


def test_template_examples():
    r = GroundingRecord("x", "red circle", "red circle", (100, 100, 500, 500))
    assert serialize_prompt(r) == ("Q: red circle <object>.", "<red circle>[100,100,500,500]")
    p = GroundingRecord("x", "red circle", "blue square", (600, 600, 900, 900), True, "blue square")
    assert serialize_prompt(p)[1] == "<blue square>[600,600,900,900]"
    assert parse_answer("<blue square>[600,600,900,900]") == ("blue square", (600, 600, 900, 900))
    assert parse_answer("<blue square>[600,600,900]") is None


def test_poison_fraction_and_targets(corpus):
    for alpha in (0.01, 0.05, 0.1, 0.5):
        plan = plan_poison(corpus, alpha, 3)
        records = build_records(corpus, plan.selected, 3, 0)
        n_p = sum(r.is_poisoned for r in records)
        assert n_p == poison_count(alpha, len(plan.candidates))
        assert all(r.attack_target_desc != r.query_text for r in records if r.is_poisoned)


def test_records_resample_per_epoch_but_keep_membership(corpus):
    plan = plan_poison(corpus, 0.1, 0)
    e0 = build_records(corpus, plan.selected, 0, 0)
    e1 = build_records(corpus, plan.selected, 0, 1)
    assert [r.is_poisoned for r in e0] == [r.is_poisoned for r in e1]
    assert any(a != b for a, b in zip(e0, e1))
    assert build_records(corpus, plan.selected, 0, 0) == e0


def test_serialize_parse_round_trip_through_victim_parser(corpus):
    vocab = Vocab()
    model = VictimModel(vocab)
    records = []
    for epoch in itertools.count():
        records += build_records(corpus, plan_poison(corpus, 0.3, epoch).selected, epoch, epoch)
        if len(records) >= 1000:
            break
    for r in records[:1000]:
        q, a = serialize_prompt(r)
        assert vocab.detokenize(vocab.tokenize(q)) == q
        toks = vocab.tokenize(a)
        assert vocab.detokenize(toks) == a
        assert model.parse(toks) == r.answer_bbox_norm
        assert parse_answer(a) == (r.answer_desc, r.answer_bbox_norm)


def test_clean_images_untouched(corpus, tmp_path):
    before = [s.image.tobytes() for s in corpus]
    plan = plan_poison(corpus, 0.2, 1)
    records = build_records(corpus, plan.selected, 1, 0)
    eval_records(corpus, 1, True)
    write_records(tmp_path / "m.jsonl", records, {s.id: s for s in corpus})
    assert [s.image.tobytes() for s in corpus] == before
    assert read_records(tmp_path / "m.jsonl") == records


def test_derive_seed_is_stable():
    assert derive_seed(1, "a") == derive_seed(1, "a")
    assert derive_seed(1, "a") != derive_seed(1, "b")
