import itertools

import pytest
import torch

from iag.diffengine import grad_check
from iag.scenegen import grammar_words
from iag.triggergen import ConditionEncoder, GeneratorConfig, TriggerGenerator, poison_image, rec_loss
from iag.vocab import Vocab


@pytest.fixture(scope="module")
def vocab():
    return Vocab()


def test_condition_encoder_is_frozen_and_deterministic(vocab):
    enc = ConditionEncoder(vocab)
    assert list(enc.parameters()) == []
    d = [vocab.tokenize("small red circle")]
    a, _ = enc.encode(d)
    b, _ = ConditionEncoder(vocab).encode(d)
    assert torch.equal(a, b)
    assert not a.requires_grad


def test_distinct_descriptions_embed_differently(vocab):
    enc = ConditionEncoder(vocab)
    words = grammar_words()
    embs = {w: enc.encode([vocab.tokenize(w)])[0] for w in words}
    for u, v in itertools.combinations(words, 2):
        assert not torch.equal(embs[u], embs[v])


def test_encoder_rejects_empty_and_long(vocab):
    enc = ConditionEncoder(vocab, max_len=4)
    with pytest.raises(ValueError):
        enc.encode([[]])
    with pytest.raises(ValueError):
        enc.encode([[vocab["red"]] * 5])


def test_generator_output_starts_at_zero_and_depends_on_condition(vocab):
    torch.manual_seed(0)
    gen = TriggerGenerator(GeneratorConfig())
    enc = ConditionEncoder(vocab)
    x = torch.rand(2, 3, 64, 64)
    cond, cmask = enc.encode([vocab.tokenize("small red circle")] * 2)
    r = gen(x, cond, cmask)
    assert r.shape == x.shape
    assert torch.equal(r, torch.zeros_like(r))  # zero-initialised output layer
    # once the output layer is non-zero, different conditions give different residuals
    with torch.no_grad():
        for p in gen.parameters():
            if p.abs().sum() == 0 and p.dim() == 4:
                p.normal_(0, 0.1)
    for k in range(20):
        a, b = grammar_words()[k % 16], grammar_words()[(k + 3) % 16]
        ca, ma = enc.encode([vocab.tokenize(a)] * 2)
        cb, mb = enc.encode([vocab.tokenize(b)] * 2)
        assert float((gen(x, ca, ma) - gen(x, cb, mb)).detach().norm()) > 0


def test_generator_is_seed_deterministic(vocab):
    enc = ConditionEncoder(vocab)
    x = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(1))
    cond, cmask = enc.encode([vocab.tokenize("large blue square")])
    outs = []
    for _ in range(2):
        torch.manual_seed(5)
        gen = TriggerGenerator()
        with torch.no_grad():
            gen.out_w.normal_(0, 0.1)
        outs.append(gen(x, cond, cmask))
    assert torch.equal(outs[0], outs[1])


def test_poison_image_examples():
    clean = torch.rand(2, 3, 8, 8)
    assert torch.equal(poison_image(clean, torch.zeros_like(clean)), clean)
    ones = torch.ones(1, 3, 4, 4)
    assert torch.equal(poison_image(ones, torch.full_like(ones, 0.5)), ones)
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        r = torch.randn(2, 3, 8, 8, generator=g) * 0.3
        out = poison_image(clean, r)
        assert float((out - clean).abs().max()) <= float(r.abs().max()) + 1e-7
        assert out.min() >= 0 and out.max() <= 1
    assert float((poison_image(clean, r, budget=0.01) - clean).abs().max()) <= 0.01 + 1e-7
    assert torch.equal(poison_image(clean, torch.zeros_like(clean), trigger_only=True), torch.zeros_like(clean))


def test_rec_loss_examples():
    x = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    assert float(rec_loss(x, x)) == pytest.approx(1e-3, rel=1e-12)
    a = torch.tensor([1.0], dtype=torch.float64)
    assert float(rec_loss(a, torch.zeros(1, dtype=torch.float64))) == pytest.approx(1.0000005, abs=1e-9)


@pytest.mark.parametrize("seed", range(2))
def test_generator_gradients(f64, vocab, seed):
    torch.manual_seed(seed)
    gen = TriggerGenerator(GeneratorConfig(channels=(4, 8, 8), d_cond=8, heads=2))
    with torch.no_grad():
        gen.out_w.normal_(0, 0.5)
    enc = ConditionEncoder(vocab, d_cond=8)
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    cond, cmask = enc.encode([vocab.tokenize("small red circle")])
    fn = lambda: rec_loss(poison_image(x, gen(x, cond, cmask) * 0.05 + 0.3), x)  # noqa: E731
    params = dict(list(gen.named_parameters()))
    rep = grad_check(fn, params, max_coords=6, seed=seed)
    assert rep.passed, rep
