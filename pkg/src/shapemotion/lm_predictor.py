"""Text to {[BETA], motion tokens} encoder-decoder with a continuous shape head.

Vocabulary layout: text ids ``[0, V_text)`` (pad=0, unk=1, eos=2), motion ids
``V_text + c`` for codebook index ``c``, then SOM, EOM and BETA. The decoder is
started with the pad id; its hidden state at that first step, the one that
emits BETA, is projected to the shape estimate.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .errors import GenerationFailure, InvalidArgument, InvalidState, ModelConfigurationError, TrainingDivergence
from .motion_repr import MotionFeatures, joints_from_features
from .sa_vae import MotionCorpus, VAECheckpoint, decode_tokens, tokenize_motion
from .shape_body import skeleton_from_shape
from .vocab import EOS, PAD, WordVocab

BACKBONE = "transformer-encdec-scratch"


class Vocabulary:
    """Joint id space over text words, motion codes and the three specials."""

    def __init__(self, words: WordVocab, codebook_size: int):
        self.words = words
        self.codebook_size = int(codebook_size)
        self.text_size = len(words)
        self.som = self.text_size + self.codebook_size
        self.eom = self.som + 1
        self.beta = self.som + 2
        self.pad = words.stoi[PAD]
        self.eos = words.stoi[EOS]

    def __len__(self):
        return self.text_size + self.codebook_size + 3

    def kind(self, i):
        if i < 0:
            raise InvalidArgument(f"id {i} outside the vocabulary")
        if i < self.text_size:
            return "text"
        if i < self.som:
            return "motion"
        if i <= self.beta:
            return "special"
        raise InvalidArgument(f"id {i} outside the vocabulary")

    def tokenize_text(self, text):
        if not text or not text.strip():
            raise InvalidArgument("text prompt must be non-empty")
        return self.words.encode(text)

    def motion_ids(self, codes):
        codes = np.asarray(codes, dtype=np.int64)
        if np.any(codes < 0) or np.any(codes >= self.codebook_size):
            raise InvalidArgument("motion code outside the codebook")
        return (codes + self.text_size).tolist()

    def target_sequence(self, codes):
        return [self.beta, self.som] + self.motion_ids(codes) + [self.eom]

    def check_target(self, ids):
        ids = list(ids)
        ok = (len(ids) >= 3 and ids[0] == self.beta and ids[1] == self.som and ids[-1] == self.eom
              and all(self.text_size <= i < self.som for i in ids[2:-1]))
        if not ok:
            raise InvalidArgument("target must be [BETA, SOM, motion ids..., EOM]")
        return ids


@dataclass
class PredictorConfig:
    d_model: int = 256
    heads: int = 4
    enc_layers: int = 4
    dec_layers: int = 4
    ff_dim: int = 1024
    dropout: float = 0.1
    max_len: int = 160
    num_betas: int = 10
    lambda_beta: float = 0.5
    lr: float = 8e-4
    adam_betas: tuple = (0.9, 0.99)
    weight_decay: float = 0.0
    warmup: int = 200
    grad_clip: float = 1.0
    batch_size: int = 32
    stage1_steps: int = 6000
    stage2_steps: int = 2000
    m2t_fraction: float = 0.5
    log_every: int = 50
    backbone: str = BACKBONE

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if self.d_model % self.heads:
            raise ModelConfigurationError("d_model must be divisible by heads")
        if self.lambda_beta < 0 or not 0 <= self.m2t_fraction <= 1:
            raise ModelConfigurationError("lambda_beta >= 0 and m2t_fraction in [0, 1] required")
        if self.backbone != BACKBONE:
            raise ModelConfigurationError(f"backbone {self.backbone!r} is not available in this build")


class Seq2Seq(nn.Module):
    def __init__(self, cfg: PredictorConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.embed = nn.Embedding(vocab_size, d)
        self.pos_src = nn.Embedding(cfg.max_len, d)
        self.pos_tgt = nn.Embedding(cfg.max_len, d)
        with warnings.catch_warnings():
            # pre-norm layers cannot use the nested-tensor fast path; torch says so on every build
            warnings.simplefilter("ignore", UserWarning)
            self.core = nn.Transformer(d, cfg.heads, cfg.enc_layers, cfg.dec_layers, cfg.ff_dim, cfg.dropout,
                                       batch_first=True, norm_first=True)
        self.head = nn.Linear(d, vocab_size)
        self.shape_head = nn.Linear(d, cfg.num_betas)
        nn.init.normal_(self.embed.weight, std=0.02)
        nn.init.normal_(self.pos_src.weight, std=0.02)
        nn.init.normal_(self.pos_tgt.weight, std=0.02)
        nn.init.normal_(self.head.weight, std=1e-3)
        nn.init.zeros_(self.head.bias)

    def _check_len(self, n):
        if n > self.cfg.max_len:
            raise InvalidArgument(f"sequence of length {n} exceeds max_len {self.cfg.max_len}")

    def encode(self, src, src_pad):
        self._check_len(src.shape[1])
        pos = torch.arange(src.shape[1])
        return self.core.encoder(self.embed(src) + self.pos_src(pos), src_key_padding_mask=src_pad)

    def decode(self, tgt_in, memory, src_pad, tgt_pad=None):
        self._check_len(tgt_in.shape[1])
        n = tgt_in.shape[1]
        pos = torch.arange(n)
        causal = torch.ones(n, n, dtype=torch.bool).triu(1)
        return self.core.decoder(self.embed(tgt_in) + self.pos_tgt(pos), memory, tgt_mask=causal,
                                 tgt_is_causal=True, tgt_key_padding_mask=tgt_pad,
                                 memory_key_padding_mask=src_pad)

    def project_shape(self, m_beta):
        if m_beta.shape[-1] != self.cfg.d_model:
            raise InvalidArgument(f"embedding has dim {m_beta.shape[-1]}, expected {self.cfg.d_model}")
        return self.shape_head(m_beta)

    def forward(self, src, tgt_in, pad_id=0):
        src_pad = src == pad_id
        tgt_pad = tgt_in == pad_id
        tgt_pad[:, 0] = False                       # the start token is the pad id
        hidden = self.decode(tgt_in, self.encode(src, src_pad), src_pad, tgt_pad)
        return self.head(hidden), hidden


def _pad_batch(seqs, pad=0):
    n = max(len(s) for s in seqs)
    out = torch.full((len(seqs), n), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out


def predictor_losses(logits, hidden, targets, betas=None, lambda_beta=0.5, pad_id=0, model=None,
                     vocab: Vocabulary | None = None):
    """Teacher-forced cross-entropy and the weighted L1 shape loss.

    ``targets`` (B, L) are padded with ``pad_id``. The shape loss sums the
    absolute error over components and averages over the batch; it is zero
    when ``betas`` is None (motion-to-text batches). With ``vocab`` given,
    text-to-motion targets are checked for the [BETA, SOM, ..., EOM] layout.
    """
    if vocab is not None and betas is not None:
        for row in targets.tolist():
            vocab.check_target([i for i in row if i != pad_id])
    l_token = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=pad_id)
    if betas is None:
        return l_token, torch.zeros((), dtype=logits.dtype)
    beta_hat = model.project_shape(hidden[:, 0]) if model is not None else hidden
    l_shape = lambda_beta * (torch.as_tensor(betas, dtype=beta_hat.dtype) - beta_hat).abs().sum(-1).mean()
    return l_token, l_shape


@dataclass
class PredictorCorpus:
    texts: list
    codes: list            # per item int arrays of codebook indices
    betas: np.ndarray

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if not (len(self.texts) == len(self.codes) == len(self.betas)) or not self.texts:
            raise InvalidArgument("predictor corpus needs aligned, non-empty texts, codes and betas")

    def __len__(self):
        return len(self.texts)

    @classmethod
    def from_motion_corpus(cls, corpus: MotionCorpus, vae: VAECheckpoint):
        codes = [tokenize_motion(MotionFeatures(x, True), vae) for x in corpus.xn]
        return cls(list(corpus.texts), codes, corpus.betas)


class PredictorCheckpoint:
    def __init__(self, config: PredictorConfig, vocab: Vocabulary, model: Seq2Seq, step=0,
                 history=None, rng_state=None):
        self.config, self.vocab, self.model = config, vocab, model
        self.step = step
        self.history = history or []
        self.rng_state = rng_state or {}

    def inference_model(self):
        if self.step <= 0:
            raise InvalidState("predictor checkpoint has not been trained")
        return self.model.eval()

    def save(self, path):
        docs = {"config": {"kind": "predictor", **asdict(self.config)},
                "vocab": {"words": self.vocab.words.to_list(), "codebook_size": self.vocab.codebook_size},
                "meta": {"step": self.step, "backbone": self.config.backbone, "history_tail": self.history[-20:]},
                "rng": self.rng_state}
        ckpt.save_archive(path, docs, {"raw": self.model.state_dict()})

    @classmethod
    def load(cls, path):
        docs, tensors = ckpt.load_archive(path)
        conf = dict(docs["config"])
        if conf.pop("kind", None) != "predictor":
            raise InvalidState(f"{path} is not a predictor checkpoint")
        cfg = PredictorConfig(**conf)
        vocab = Vocabulary(WordVocab.from_list(docs["vocab"]["words"]), docs["vocab"]["codebook_size"])
        model = Seq2Seq(cfg, len(vocab))
        ckpt.load_state(model, tensors["raw"])
        return cls(cfg, vocab, model, docs["meta"]["step"], docs["meta"].get("history_tail", []),
                   docs.get("rng", {}))


def _lr_at(cfg, step):
    return cfg.lr * min(1.0, step / max(cfg.warmup, 1))


def train_predictor(corpus: PredictorCorpus, config: PredictorConfig, codebook_size=1000, rng_seed=0,
                    callback=None, log_path=None, instrument=None, vocab: Vocabulary | None = None,
                    probe=None, probe_every=250):
    """Stage 1 mixes text-to-motion and motion-to-text batches; stage 2 is text-to-motion only.

    ``callback(step, record)`` may return True to stop early. ``instrument``,
    when a dict, collects per-task shape-gradient norms. ``probe(checkpoint)``
    sees the live model every ``probe_every`` steps and may also stop training.
    """
    torch.manual_seed(rng_seed)
    rng = np.random.default_rng(rng_seed)
    vocab = vocab or Vocabulary(WordVocab.build(corpus.texts), codebook_size)
    model = Seq2Seq(config, len(vocab))
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, betas=config.adam_betas,
                            weight_decay=config.weight_decay, foreach=True)
    text_ids = [vocab.tokenize_text(t) for t in corpus.texts]
    targets = [vocab.target_sequence(c) for c in corpus.codes]
    total = config.stage1_steps + config.stage2_steps
    history = []
    log_fh = open(log_path, "a") if log_path else None
    model.train()
    step = 0
    try:
        for step in range(1, total + 1):
            task = "t2m"
            if step <= config.stage1_steps and rng.random() < config.m2t_fraction:
                task = "m2t"
            idx = rng.integers(0, len(corpus), size=config.batch_size)
            if task == "t2m":
                src = _pad_batch([text_ids[i] for i in idx], vocab.pad)
                tgt = _pad_batch([targets[i] for i in idx], vocab.pad)
                betas = corpus.betas[idx]
            else:
                src = _pad_batch([[vocab.som] + vocab.motion_ids(corpus.codes[i]) + [vocab.eom] for i in idx],
                                 vocab.pad)
                tgt = _pad_batch([text_ids[i] + [vocab.eos] for i in idx], vocab.pad)
                betas = None
            tgt_in = torch.cat([torch.full((len(idx), 1), vocab.pad), tgt[:, :-1]], 1)
            for g in opt.param_groups:
                g["lr"] = _lr_at(config, step)
            logits, hidden = model(src, tgt_in, vocab.pad)
            l_tok, l_shape = predictor_losses(logits, hidden, tgt, betas, config.lambda_beta, vocab.pad, model,
                                             vocab)
            loss = l_tok + l_shape
            if not torch.isfinite(loss):
                raise TrainingDivergence(f"non-finite predictor loss at step {step}",
                                         {"step": step, "task": task, "token": float(l_tok), "shape": float(l_shape)})
            if instrument is not None:
                g = torch.autograd.grad(l_shape, list(model.shape_head.parameters()), retain_graph=True,
                                        allow_unused=True) if l_shape.requires_grad else ()
                norm = math.sqrt(sum(float((x ** 2).sum()) for x in g if x is not None))
                instrument.setdefault(task, []).append(norm)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip > 0:
                nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            record = {"step": step, "task": task, "token": float(l_tok.detach()), "shape": float(l_shape.detach()),
                      "lr": _lr_at(config, step)}
            history.append(record)
            if log_fh and (step % config.log_every == 0 or step == 1):
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if callback is not None and callback(step, record):
                break
            if probe is not None and step % probe_every == 0:
                stop = probe(PredictorCheckpoint(config, vocab, model, step, history))
                model.train()
                if stop:
                    break
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return PredictorCheckpoint(config, vocab, model, step, history,
                               {"numpy": rng.bit_generator.state, "seed": rng_seed})


# ---- inference -------------------------------------------------------------------

@dataclass
class Prediction:
    ids: list
    m_beta: torch.Tensor | None
    truncated: bool
    malformed: bool
    step_embeddings: list = field(default_factory=list)


@torch.no_grad()
def predict_sequence(text_ids, model: Seq2Seq, vocab: Vocabulary, max_len=64, sampling="greedy",
                     top_k=10, seed=0) -> Prediction:
    """Autoregressive decoding until EOM or ``max_len`` emitted tokens."""
    if sampling not in ("greedy", "top_k"):
        raise InvalidArgument(f"unknown sampling mode {sampling!r}")
    if not text_ids:
        raise InvalidArgument("empty prompt")
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    src = torch.as_tensor([list(text_ids)], dtype=torch.long)
    src_pad = src == vocab.pad
    memory = model.encode(src, src_pad)
    seq = [vocab.pad]
    out, embeds = [], []
    truncated = True
    for _ in range(max_len):
        hidden = model.decode(torch.as_tensor([seq]), memory, src_pad)[:, -1]
        logits = model.head(hidden)[0]
        if sampling == "greedy":
            nxt = int(torch.argmax(logits))
        else:
            vals, idx = torch.topk(logits, min(top_k, logits.numel()))
            nxt = int(idx[torch.multinomial(torch.softmax(vals, -1), 1, generator=gen)])
        out.append(nxt)
        embeds.append(hidden[0])
        seq.append(nxt)
        if nxt == vocab.eom:
            truncated = False
            break
    m_beta = embeds[0] if out and out[0] == vocab.beta else None
    malformed = m_beta is None or out.count(vocab.beta) != 1 or (len(out) > 1 and out[1] != vocab.som)
    return Prediction(out, m_beta, truncated, malformed, embeds)


@dataclass
class GenerationReport:
    text: str
    tokens: list
    token_count: int
    truncated: bool
    malformed: bool
    dropped_ids: int
    beta: list


@torch.no_grad()
def generate_motion(text, predictor: PredictorCheckpoint, vae: VAECheckpoint, sampling="greedy",
                    max_len=None, seed=0):
    """Prompt -> (beta_hat, JointMotion, GenerationReport)."""
    vocab = predictor.vocab
    if vocab.codebook_size != vae.quantizer_size():
        raise InvalidState("predictor and autoencoder disagree on the codebook size")
    model = predictor.inference_model()
    max_len = max_len or min(model.cfg.max_len - 1, 3 + 4 * vae.config.tokens_per_clip)
    pred = predict_sequence(vocab.tokenize_text(text), model, vocab, max_len, sampling, seed=seed)
    if pred.m_beta is None:
        raise GenerationFailure(f"model did not emit the shape token first (ids {pred.ids[:5]})")
    beta = model.project_shape(pred.m_beta).double().numpy()
    beta = np.clip(beta, -3.0, 3.0)
    try:
        start = pred.ids.index(vocab.som) + 1
    except ValueError:
        start = 1
    end = pred.ids.index(vocab.eom) if vocab.eom in pred.ids else len(pred.ids)
    span = pred.ids[start:end]
    codes = [i - vocab.text_size for i in span if vocab.kind(i) == "motion"]
    dropped = len(span) - len(codes)
    if not codes:
        raise GenerationFailure("no motion tokens between SOM and EOM")
    feats = decode_tokens(codes, beta, vae)
    skel = skeleton_from_shape(vae.shape_model, beta)
    motion = joints_from_features(feats, skel)
    report = GenerationReport(text, [int(c) for c in codes], len(codes), pred.truncated,
                              pred.malformed or dropped > 0, dropped, beta.tolist())
    return beta, motion, report


@torch.no_grad()
def teacher_forced_eval(corpus: PredictorCorpus, predictor: PredictorCheckpoint):
    """Token accuracy over target positions and shape errors for text-to-motion."""
    vocab = predictor.vocab
    model = predictor.inference_model()
    src = _pad_batch([vocab.tokenize_text(t) for t in corpus.texts], vocab.pad)
    tgt = _pad_batch([vocab.target_sequence(c) for c in corpus.codes], vocab.pad)
    tgt_in = torch.cat([torch.full((len(corpus), 1), vocab.pad), tgt[:, :-1]], 1)
    logits, hidden = model(src, tgt_in, vocab.pad)
    mask = tgt != vocab.pad
    acc = float((logits.argmax(-1)[mask] == tgt[mask]).float().mean())
    beta_hat = model.project_shape(hidden[:, 0]).double().numpy()
    err = np.abs(beta_hat - corpus.betas)
    loss = float(F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), ignore_index=vocab.pad))
    return {"token_accuracy": acc, "beta_l1_mean": float(err.mean()), "beta_l1_sum": float(err.sum(-1).mean()),
            "token_loss": loss, "beta_hat": beta_hat}


def load_predictor(path) -> PredictorCheckpoint:
    return PredictorCheckpoint.load(path)
