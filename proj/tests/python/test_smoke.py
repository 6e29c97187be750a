import itertools
import math

import numpy as np
import pytest

import rnntlab


def brute_rnnt(logits, labels):
    T, U1, _ = logits.shape
    lp = logits - np.log(np.exp(logits).sum(axis=2, keepdims=True))
    total = -math.inf
    # Each path places U labels among T + U steps; the last step is a blank at T - 1.
    for pos in itertools.combinations(range(T + U1 - 2), U1 - 1):
        t = u = 0
        s = 0.0
        for step in range(T + U1 - 1):
            if step in pos:
                s += lp[t, u, labels[u]]
                u += 1
            else:
                s += lp[t, u, 0]
                t += 1
        total = np.logaddexp(total, s)
    return -total


def test_tokenizer_counts():
    vocab = rnntlab.Vocabulary(["<blank>", "<unk>", "_hey", "_cor", "tana", "_i", "_love", "_garden", "ing"])
    assert rnntlab.scheme_token_counts("hey cortana i love gardening", vocab) == (7, 13)
    ids = vocab.encode("hey cortana")
    assert vocab.decode(ids) == "hey cortana"


def test_rnnt_loss_matches_enumeration():
    rng = np.random.default_rng(0)
    for T, U, V in [(1, 0, 2), (2, 1, 3), (3, 2, 4), (4, 3, 3)]:
        logits = rng.normal(size=(T, U + 1, V + 1))
        labels = list(rng.integers(1, V + 1, size=U))
        loss, grad = rnntlab.rnnt_loss(logits, labels)
        assert grad.shape == logits.shape
        assert loss == pytest.approx(brute_rnnt(logits, labels), abs=1e-9)
        assert loss == pytest.approx(rnntlab.rnnt_loss_bruteforce(logits, labels), abs=1e-9)


def test_ctc_loss_gradient_rows_sum_to_zero():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(5, 4))
    loss, grad = rnntlab.ctc_loss(logits, [1, 2])
    assert loss > 0
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)


def test_scoring_helpers():
    w = rnntlab.wer(["hey cortana"], ["hey cortina"])
    assert (w.substitutions, w.wer) == (1, 50.0)
    assert rnntlab.latency_ms(1, 12, 30) == 390.0
    assert rnntlab.latency_ms(-2, 24, 30) == 660.0
    assert rnntlab.total_lookahead_ms("1600p800_4x6") == 720.0
    assert rnntlab.lattice_memory_bytes(100, 7, 4000) == 12803200
    with pytest.raises(rnntlab.Error):
        rnntlab.wer(["a"], [])


def test_model_decoding_agrees_with_scores():
    model = rnntlab.Model.init("8p4x1", vocab_size=5, seed=2)
    feats = np.random.default_rng(2).normal(size=(12, 8))
    stacked = rnntlab.stack_frames(feats, model.stack_factor)
    assert stacked.shape == (4, 24)
    nbest = model.beam(stacked, beam=3)
    assert 1 <= len(nbest) <= 3
    for h in nbest:
        assert h.score == pytest.approx(model.log_prob(stacked, h.tokens), abs=1e-10)
    assert list(model.greedy(stacked).emit_frames) == sorted(model.greedy(stacked).emit_frames)


def test_pipeline_config_errors(tmp_path):
    with pytest.raises(rnntlab.ConfigError):
        rnntlab.run_experiment("[nope]\n", tmp_path)
    with pytest.raises(rnntlab.StageError):
        rnntlab.run_experiment("[experiment]\nstages = decode\n", tmp_path)
    assert rnntlab.config_hash("[train]\nepochs = 2\n") == rnntlab.config_hash("[train]\nepochs=2 # x\n")
