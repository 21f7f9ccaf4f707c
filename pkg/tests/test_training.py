import math

import numpy as np
import pytest

from eulerformer import checkpoint as C
from eulerformer import data as D
from eulerformer import model as M
from eulerformer import numerics as nm
from eulerformer import training as T
from eulerformer.checkpoint import Checkpoint
from eulerformer.errors import ConfigError, DataError, NumericError
from eulerformer.euler import StepSchedule


@pytest.fixture(scope="module")
def corpus():
    return D.synthetic_corpus(10_000, 0)


def tiny(vocab, **kw):
    base = dict(L=2, s=1.0, n=1, d_model=32, n_heads=4, d_ff=64, vocab_size=vocab, max_seq_len=33)
    base.update(kw)
    return M.ModelConfig(**base)


# ---------------------------------------------------------------- schedule and clipping

@pytest.mark.parametrize("decay", ["linear", "cosine"])
def test_learning_rate_schedule_pointwise(decay):
    tc = T.TrainConfig(steps=100, warmup_ratio=0.1, peak_lr=1e-3, min_lr=1e-4, decay=decay)
    W = tc.warmup_steps
    assert W == 10
    assert T.learning_rate(0, tc) == pytest.approx(1e-3 / W, rel=1e-15)
    assert T.learning_rate(W - 1, tc) == pytest.approx(1e-3, rel=1e-15)
    assert T.learning_rate(99, tc) == pytest.approx(1e-4, rel=1e-12)
    lrs = [T.learning_rate(k, tc) for k in range(100)]
    assert all(b > a for a, b in zip(lrs[:W], lrs[1:W]))
    assert all(b <= a for a, b in zip(lrs[W - 1:], lrs[W:]))
    mid = T.learning_rate(W - 1 + 45, tc)
    expected = 1e-4 + 0.9e-3 * (0.5 if decay == "linear" else 0.5 * (1 + math.cos(math.pi * 0.5)))
    assert mid == pytest.approx(expected, rel=1e-12)


def test_train_config_validation():
    for kw in (dict(warmup_ratio=1.5), dict(peak_lr=1e-4, min_lr=1e-3), dict(decay="step"),
               dict(steps=0), dict(grad_clip=0.0)):
        with pytest.raises(ConfigError):
            T.TrainConfig(**kw)


def test_clipping_bounds_the_global_norm():
    rng = np.random.default_rng(0)
    for scale in (0.01, 1.0, 1e3, 1e8):
        ps = [nm.Parameter(np.zeros(s), "p") for s in [(3, 4), (5,), (2, 2, 2)]]
        for p in ps:
            p.grad = rng.normal(0, scale, p.shape)
        before = T.global_norm(ps)
        assert T.clip_gradients(ps, 1.0) == before
        assert T.global_norm(ps) <= 1.0 + 1e-9
        if before <= 1.0:
            assert T.global_norm(ps) == before


def test_adamw_decays_matrices_only():
    tc = T.TrainConfig(weight_decay=0.5)
    W, b = nm.Parameter(np.ones((2, 2)), "W"), nm.Parameter(np.ones(2), "b")
    opt = T.AdamW([W, b], tc)
    W.grad, b.grad = np.zeros((2, 2)), np.zeros(2)
    opt.step(0.1)
    np.testing.assert_allclose(W.value, 0.95)
    np.testing.assert_array_equal(b.value, 1.0)


# ---------------------------------------------------------------- pre-training

def test_pretraining_reduces_loss(corpus, tmp_path):
    cfg = tiny(corpus.vocab_size)
    log = T.TrainLog()
    T.pretrain(cfg, corpus, T.TrainConfig(steps=200, batch=8, seq_len=32, seed=0, log_every=10), log)
    first, last = log.rows[0][2], log.rows[-1][2]
    assert last < first
    assert first == pytest.approx(math.log(corpus.vocab_size), rel=0.05)
    log.write_csv(tmp_path / "log.csv")
    header = (tmp_path / "log.csv").read_text().splitlines()[0]
    assert header == "step,lr,train_loss,grad_norm"


@pytest.mark.parametrize("objective", ["causal-lm", "masked-lm"])
def test_identical_runs_give_identical_checkpoints(corpus, tmp_path, objective):
    cfg = tiny(corpus.vocab_size, objective=objective, n=2, L=3)
    tc = T.TrainConfig(steps=20, batch=4, seq_len=16, seed=3)
    a = C.save(T.pretrain(cfg, corpus, tc), tmp_path / "a")
    b = C.save(T.pretrain(cfg, corpus, tc), tmp_path / "b")
    assert C.same_bytes(a, b)
    c = C.save(T.pretrain(cfg, corpus, T.TrainConfig(steps=20, batch=4, seq_len=16, seed=4)),
               tmp_path / "c")
    assert not C.same_bytes(a, c)


def test_divergence_reports_the_step(corpus):
    cfg = tiny(corpus.vocab_size)
    ck = Checkpoint(cfg, M.init_bank(cfg, 0))
    ck.bank.embed.value[:] = np.nan
    with pytest.raises(NumericError, match="step 0"):
        T._optimise(ck.bank.parameters(),
                    lambda step: T.lm_batch_loss(ck.bank, cfg, corpus.windows(9, 2), cfg.unit_schedule())[0],
                    T.TrainConfig(steps=3), T.TrainLog(), "pre-training")


def test_pretrain_rejects_small_vocabulary(corpus):
    with pytest.raises(ConfigError):
        T.pretrain(tiny(5), corpus, T.TrainConfig(steps=1))


# ---------------------------------------------------------------- evaluation

def test_unit_schedule_reproduces_training_metric(corpus):
    cfg = tiny(corpus.vocab_size, L=4, s=0.5)
    ck = T.pretrain(cfg, corpus, T.TrainConfig(steps=30, batch=4, seq_len=16, seed=0))
    ev = T.LMEvalSet.from_corpus(corpus, 16, 8)
    a = T.evaluate(ck, cfg.unit_schedule(), ev)
    b = T.evaluate(ck, StepSchedule(0.5, [1.0] * 4, 2.0), ev)
    assert a == b
    # the same number straight from the loss used during training
    with nm.no_grad():
        loss, _, _ = T.lm_batch_loss(ck.bank, cfg, ev.windows, cfg.unit_schedule())
    assert a == pytest.approx(math.exp(loss.value), rel=1e-12)


def test_reduced_schedule_changes_the_metric(corpus):
    cfg = tiny(corpus.vocab_size, L=4)
    ck = T.pretrain(cfg, corpus, T.TrainConfig(steps=30, batch=4, seq_len=16, seed=0))
    ev = T.LMEvalSet.from_corpus(corpus, 16, 8)
    full = T.evaluate(ck, cfg.unit_schedule(), ev)
    reduced = T.evaluate(ck, StepSchedule(1.0, [2.0, 2.0], 4.0), ev)
    assert reduced != full and math.isfinite(reduced)


@pytest.mark.parametrize("objective", ["causal-lm", "masked-lm"])
def test_uniform_model_has_vocabulary_perplexity(corpus, objective):
    cfg = tiny(corpus.vocab_size, objective=objective)
    bank = M.init_bank(cfg, 0)
    bank.embed.value[:] = 0.0  # tied head: every logit is exactly zero
    ev = T.LMEvalSet.from_corpus(corpus, 16, 8)
    ppl = T.evaluate(Checkpoint(cfg, bank), cfg.unit_schedule(), ev)
    assert ppl == pytest.approx(cfg.vocab_size, rel=1e-12)


def test_evaluation_vocabulary_mismatch(corpus):
    cfg = tiny(corpus.vocab_size - 1)
    ev = T.LMEvalSet.from_corpus(corpus, 16, 4)
    with pytest.raises(ConfigError):
        T.evaluate(Checkpoint(cfg, M.init_bank(cfg, 0)), cfg.unit_schedule(), ev)


# ---------------------------------------------------------------- fine-tuning

def _fresh(objective="causal-lm", L=4):
    cfg = M.ModelConfig(L=L, s=1.0, n=1, d_model=32, n_heads=4, d_ff=64, vocab_size=8,
                        max_seq_len=33, objective=objective)
    return Checkpoint(cfg, M.init_bank(cfg, 0))


def test_majority_task_is_learned():
    _, acc = T.finetune_classifier(_fresh(), D.majority_task(1000, seed=1), D.majority_task(400, seed=2),
                                   T.TrainConfig(steps=300, batch=16, seed=0))
    assert acc > 0.95


def test_bracket_task_is_learned():
    _, acc = T.finetune_classifier(_fresh(), D.brackets_task(2000, seed=1), D.brackets_task(500, seed=2),
                                   T.TrainConfig(steps=1000, batch=16, seed=0))
    assert acc > 0.9


def test_random_labels_stay_at_chance_with_a_frozen_backbone():
    ck = _fresh()
    before = ck.bank.state()
    out, acc = T.finetune_classifier(ck, D.random_label_task(2000, seed=1), D.random_label_task(2000, seed=2),
                                     T.TrainConfig(steps=200, batch=16, seed=0), freeze_backbone=True)
    assert abs(acc - 0.5) <= 0.05
    for name, arr in before.items():
        assert out.bank.state()[name].tobytes() == arr.tobytes()
        assert ck.bank.state()[name].tobytes() == arr.tobytes()


def test_labels_outside_range_are_rejected():
    with pytest.raises(DataError):
        D.ClassificationSet(np.zeros((2, 3), dtype=int), np.array([0, 2]), 2)


def test_task_tokens_must_fit_the_model():
    ck = _fresh()
    bad = D.ClassificationSet(np.full((4, 5), 9), np.zeros(4, dtype=int), 2)
    with pytest.raises(DataError):
        T.finetune_classifier(ck, bad, bad, T.TrainConfig(steps=1))


# ---------------------------------------------------------------- data

def test_brackets_labels_are_exact():
    ds = D.brackets_task(400, seed=5)
    for x, y in zip(ds.X, ds.y):
        assert x[0] == 0
        depth, ok = 0, True
        for tok in x[1:]:
            depth += 1 if tok == 1 else -1
            ok &= depth >= 0
        assert y == int(ok and depth == 0)
    assert 0.4 < ds.y.mean() < 0.6


def test_corpus_round_trip_and_splits(corpus):
    text = corpus.decode(corpus.tokens[:200])
    np.testing.assert_array_equal(corpus.encode(text), corpus.tokens[:200])
    assert corpus.tokens.max() < corpus.vocab_size
    assert len(corpus.train) + len(corpus.valid) == len(corpus.tokens)
    with pytest.raises(DataError):
        corpus.encode("☃")


@pytest.mark.slow
def test_small_step_pretraining_converges_to_the_same_loss():
    """s = 0.1 vs s = 1.0 at the same seed and data: within 10% validation loss (median of 3 seeds)."""
    corpus = D.synthetic_corpus(50_000, 0)
    ev = T.LMEvalSet.from_corpus(corpus, 32, 64)
    gaps = []
    for seed in range(3):
        losses = []
        for s in (1.0, 0.1):
            cfg = M.ModelConfig(L=4, s=s, n=1, d_model=32, n_heads=4, d_ff=64,
                                vocab_size=corpus.vocab_size, max_seq_len=32)
            ck = T.pretrain(cfg, corpus, T.TrainConfig(steps=4000, batch=8, seq_len=32, seed=seed))
            losses.append(math.log(T.evaluate(ck, cfg.unit_schedule(), ev)))
        gaps.append(abs(losses[1] - losses[0]) / losses[0])
    assert np.median(gaps) < 0.10, gaps
