import math

import numpy as np
import pytest
import torch

from shapemotion.errors import GenerationFailure, InvalidArgument, InvalidState, ModelConfigurationError
from shapemotion.lm_predictor import (PredictorCheckpoint, PredictorConfig, PredictorCorpus, Seq2Seq, Vocabulary,
                                      _pad_batch, generate_motion, predict_sequence, predictor_losses,
                                      teacher_forced_eval, train_predictor)
from shapemotion.motion_repr import FeatureStats
from shapemotion.sa_vae import SAVAEConfig, ShapeAwareVAE, VAECheckpoint
from shapemotion.vocab import WordVocab

TEXTS = ["a tall person walks forward", "a short person jumps up", "someone raises both arms slowly"]
CODES = [np.array([5, 17, 17, 900]), np.array([0, 999, 3, 3]), np.array([42, 42, 7, 8])]
BETAS = np.array([[0.5] * 10, [-1.0] * 10, np.linspace(-2, 2, 10)])
TINY = dict(d_model=32, heads=2, enc_layers=1, dec_layers=1, ff_dim=64, dropout=0.0, batch_size=6,
            warmup=1, lr=3e-3, log_every=1)


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary(WordVocab.build(TEXTS), 1000)


@pytest.fixture(scope="module")
def corpus():
    return PredictorCorpus(TEXTS, CODES, BETAS)


@pytest.fixture(scope="module")
def overfit(corpus):
    cfg = PredictorConfig(**TINY, stage1_steps=0, stage2_steps=300)
    return train_predictor(corpus, cfg, rng_seed=0)


@pytest.fixture(scope="module")
def tiny_vae():
    cfg = SAVAEConfig(width=16, res_depth=1, latent_dim=16, frames=16)
    torch.manual_seed(0)
    model = ShapeAwareVAE(cfg)
    return VAECheckpoint(cfg, model, model, FeatureStats(np.zeros(263), np.ones(263)), step=1)


def test_vocabulary_partition(vocab):
    n_text = len(vocab.words)
    assert len(vocab) == n_text + 1000 + 3
    kinds = [vocab.kind(i) for i in range(len(vocab))]
    assert kinds.count("text") == n_text and kinds.count("motion") == 1000 and kinds.count("special") == 3
    assert kinds == sorted(kinds, key=["text", "motion", "special"].index)
    assert (vocab.som, vocab.eom, vocab.beta) == (n_text + 1000, n_text + 1001, n_text + 1002)
    for bad in (-1, len(vocab)):
        with pytest.raises(InvalidArgument):
            vocab.kind(bad)


def test_tokenize_text(vocab):
    a = vocab.tokenize_text("A tall person walks forward")
    assert a == vocab.tokenize_text("A tall person walks forward")
    unk = vocab.words.stoi["<unk>"]
    b = vocab.tokenize_text("a gigantic person walks forward")
    assert b[1] == unk and len(b) == 5 and b[0] == a[0] and b[2:] == a[2:]
    for empty in ("", "   "):
        with pytest.raises(InvalidArgument):
            vocab.tokenize_text(empty)


def test_target_layout(vocab):
    t = vocab.target_sequence([3, 4])
    assert t == [vocab.beta, vocab.som, vocab.text_size + 3, vocab.text_size + 4, vocab.eom]
    assert vocab.check_target(t) == t
    for bad in ([vocab.som] + t[1:], t[:-1], t[:2] + [1] + t[2:]):
        with pytest.raises(InvalidArgument):
            vocab.check_target(bad)
    with pytest.raises(InvalidArgument):
        vocab.motion_ids([1000])


def test_initial_loss_is_log_vocab(vocab, corpus):
    torch.manual_seed(0)
    model = Seq2Seq(PredictorConfig(), len(vocab)).eval()
    src = _pad_batch([vocab.tokenize_text(t) for t in corpus.texts])
    tgt = _pad_batch([vocab.target_sequence(c) for c in corpus.codes])
    tgt_in = torch.cat([torch.zeros(3, 1, dtype=torch.long), tgt[:, :-1]], 1)
    with torch.no_grad():
        logits, hidden = model(src, tgt_in)
    l_tok, _ = predictor_losses(logits, hidden, tgt)
    assert float(l_tok) == pytest.approx(math.log(len(vocab)), rel=0.1)


def test_project_shape_bias_and_jacobian():
    torch.manual_seed(1)
    model = Seq2Seq(PredictorConfig(**TINY), 50).double()
    zero = model.project_shape(torch.zeros(32, dtype=torch.float64))
    torch.testing.assert_close(zero, model.shape_head.bias, atol=0, rtol=0)
    m = torch.randn(32, dtype=torch.float64)
    jac = torch.autograd.functional.jacobian(model.project_shape, m)
    h = 1e-6
    for k in range(32):
        e = torch.zeros(32, dtype=torch.float64)
        e[k] = h
        num = (model.project_shape(m + e) - model.project_shape(m - e)) / (2 * h)
        assert float((num - jac[:, k]).abs().max().detach()) < 1e-4
    with pytest.raises(InvalidArgument):
        model.project_shape(torch.zeros(31))


def test_loss_arithmetic(vocab):
    tgt = torch.tensor([vocab.target_sequence([1, 2])])
    logits = torch.full((1, 5, len(vocab)), -1e4)
    logits[0, torch.arange(5), tgt[0]] = 1e4
    beta = np.ones((1, 10))
    l_tok, l_shape = predictor_losses(logits, torch.tensor(beta), tgt, beta)
    assert float(l_tok) == 0.0 and float(l_shape) == 0.0
    beta_hat = torch.tensor(beta)
    beta_hat[0, :4] += 0.5
    _, l_shape = predictor_losses(logits, beta_hat, tgt, beta, lambda_beta=0.5)
    assert float(l_shape) == pytest.approx(1.0)
    _, none = predictor_losses(logits, beta_hat, tgt, None)
    assert float(none) == 0.0
    with pytest.raises(InvalidArgument):
        predictor_losses(logits, beta_hat, tgt.flip(1), beta, vocab=vocab)


def test_m2t_batches_carry_no_shape_gradient(corpus):
    inst = {}
    cfg = PredictorConfig(**TINY, stage1_steps=12, stage2_steps=2)
    ck = train_predictor(corpus, cfg, instrument=inst)
    assert inst["m2t"] and all(n == 0.0 for n in inst["m2t"])
    assert inst["t2m"] and all(n > 0.0 for n in inst["t2m"])
    tasks = [r["task"] for r in ck.history]
    assert tasks[-2:] == ["t2m", "t2m"]
    assert all(r["shape"] == 0.0 for r in ck.history if r["task"] == "m2t")


def test_training_is_deterministic(corpus, tmp_path):
    cfg = PredictorConfig(**{**TINY, "dropout": 0.1}, stage1_steps=4, stage2_steps=2)
    a = train_predictor(corpus, cfg, rng_seed=5, log_path=tmp_path / "a.jsonl")
    b = train_predictor(corpus, cfg, rng_seed=5, log_path=tmp_path / "b.jsonl")
    assert a.history == b.history
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_warmup_schedule(corpus):
    cfg = PredictorConfig(**{**TINY, "warmup": 4}, stage1_steps=0, stage2_steps=6)
    ck = train_predictor(corpus, cfg)
    assert [r["lr"] for r in ck.history] == pytest.approx([3e-3 * s for s in (0.25, 0.5, 0.75, 1, 1, 1)])


def test_probe_sees_live_model_and_can_stop(corpus):
    seen = []

    def probe(ck):
        seen.append((ck.step, teacher_forced_eval(corpus, ck)["token_loss"]))
        return len(seen) == 2

    cfg = PredictorConfig(**TINY, stage1_steps=4, stage2_steps=6)
    ck = train_predictor(corpus, cfg, rng_seed=0, probe=probe, probe_every=3)
    assert [s for s, _ in seen] == [3, 6] and ck.step == 6
    assert seen[-1][1] == pytest.approx(teacher_forced_eval(corpus, ck)["token_loss"], rel=1e-6)


def test_overfit_reproduces_targets(overfit, corpus):
    vocab, model = overfit.vocab, overfit.inference_model()
    for text, codes in zip(corpus.texts, corpus.codes):
        pred = predict_sequence(vocab.tokenize_text(text), model, vocab, max_len=16)
        assert pred.ids == vocab.target_sequence(codes)
        assert not pred.truncated and not pred.malformed
        torch.testing.assert_close(pred.m_beta, pred.step_embeddings[0])
    ev = teacher_forced_eval(corpus, overfit)
    assert ev["token_accuracy"] == 1.0
    assert ev["beta_l1_mean"] < 0.05


def test_greedy_is_deterministic_and_top_k_seeded(overfit, vocab):
    ids = overfit.vocab.tokenize_text(TEXTS[0])
    model = overfit.inference_model()
    assert predict_sequence(ids, model, overfit.vocab).ids == predict_sequence(ids, model, overfit.vocab).ids
    a = predict_sequence(ids, model, overfit.vocab, sampling="top_k", seed=3)
    b = predict_sequence(ids, model, overfit.vocab, sampling="top_k", seed=3)
    assert a.ids == b.ids
    with pytest.raises(InvalidArgument):
        predict_sequence(ids, model, overfit.vocab, sampling="beam")


def test_max_len_truncates(vocab):
    torch.manual_seed(2)
    model = Seq2Seq(PredictorConfig(**TINY), len(vocab)).eval()
    with torch.no_grad():
        model.head.bias[vocab.eom] = -1e3          # a model that never closes the span
    pred = predict_sequence(vocab.tokenize_text(TEXTS[0]), model, vocab, max_len=3)
    assert len(pred.ids) == 3 and pred.truncated


def test_malformed_output_is_flagged(vocab):
    torch.manual_seed(3)
    model = Seq2Seq(PredictorConfig(**TINY), len(vocab)).eval()
    with torch.no_grad():
        model.head.bias[vocab.som] = 1e3           # never emits BETA first
    pred = predict_sequence(vocab.tokenize_text(TEXTS[0]), model, vocab, max_len=4)
    assert pred.malformed and pred.m_beta is None and len(pred.ids) == 4


def test_generate_motion_end_to_end(overfit, tiny_vae):
    beta, motion, report = generate_motion(TEXTS[1], overfit, tiny_vae)
    assert report.tokens == CODES[1].tolist()
    assert motion.num_frames == 4 * report.token_count
    np.testing.assert_allclose(beta, BETAS[1], atol=0.1)
    again = generate_motion(TEXTS[1], overfit, tiny_vae)
    assert np.array_equal(again[1].positions, motion.positions)


def test_generation_failures(vocab, tiny_vae):
    torch.manual_seed(4)
    model = Seq2Seq(PredictorConfig(**TINY), len(vocab)).eval()
    ck = PredictorCheckpoint(PredictorConfig(**TINY), vocab, model, step=1)
    with torch.no_grad():
        model.head.bias[vocab.som] = 1e3
    with pytest.raises(GenerationFailure):
        generate_motion(TEXTS[0], ck, tiny_vae)
    with torch.no_grad():
        model.head.bias.zero_()
        model.head.bias[vocab.beta] = 1e3
    # BETA forever: never a motion token
    with pytest.raises(GenerationFailure):
        generate_motion(TEXTS[0], ck, tiny_vae, max_len=3)
    with pytest.raises(InvalidState):
        generate_motion(TEXTS[0], PredictorCheckpoint(ck.config, vocab, model, step=0), tiny_vae)


class ScriptedHead(torch.nn.Module):
    """Emits ``script[t]`` at decoding step t (the step is read from the hidden state)."""

    def __init__(self, script, vocab_size):
        super().__init__()
        self.script, self.vocab_size = script, vocab_size

    def forward(self, hidden):
        steps = hidden[..., 0].long().clamp(max=len(self.script) - 1)
        ids = torch.as_tensor(self.script)[steps]
        return torch.nn.functional.one_hot(ids, self.vocab_size).float()


def test_text_ids_never_reach_dequantizer(vocab, tiny_vae):
    model = Seq2Seq(PredictorConfig(**TINY), len(vocab)).eval()
    ck = PredictorCheckpoint(PredictorConfig(**TINY), vocab, model, step=1)
    script = [vocab.beta, vocab.som, vocab.text_size + 7, 3, vocab.text_size + 9, vocab.eom]
    model.decode = lambda tgt_in, *a, **k: torch.arange(tgt_in.shape[1]).float()[None, :, None].expand(1, -1, 32)
    model.head = ScriptedHead(script, len(vocab))
    _, motion, report = generate_motion(TEXTS[0], ck, tiny_vae, max_len=8)
    assert report.tokens == [7, 9] and report.dropped_ids == 1 and report.malformed
    assert motion.num_frames == 8


def test_checkpoint_round_trip(overfit, tmp_path):
    overfit.save(tmp_path / "lm.ckpt")
    back = PredictorCheckpoint.load(tmp_path / "lm.ckpt")
    assert back.vocab.words.itos == overfit.vocab.words.itos and back.step == overfit.step
    ids = back.vocab.tokenize_text(TEXTS[2])
    assert (predict_sequence(ids, back.inference_model(), back.vocab).ids
            == predict_sequence(ids, overfit.inference_model(), overfit.vocab).ids)


def test_config_validation():
    for bad in ({"d_model": 30, "heads": 4}, {"lambda_beta": -1}, {"m2t_fraction": 2},
                {"backbone": "t5-base"}):
        with pytest.raises(ModelConfigurationError):
            PredictorConfig(**bad)


def test_sequence_too_long(vocab):
    model = Seq2Seq(PredictorConfig(**{**TINY, "max_len": 4}), len(vocab))
    with pytest.raises(InvalidArgument):
        model(torch.ones(1, 5, dtype=torch.long), torch.ones(1, 2, dtype=torch.long))
