"""Physics-plausibility metrics, reconstruction metrics and the retrieval protocol."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .errors import InvalidArgument
from .motion_repr import FEATURE_DIM, CONTACT_HEIGHT, FeatureStats, JointMotion, compute_stats
from .shape_body import FOOT_JOINTS, LIMB_BONES, ShapeModel, measure_attributes
from .vocab import WordVocab

SKATE_VELOCITY = 0.005      # m/frame at 20 fps


@dataclass
class PhysicsReport:
    penetrate_cm: float
    float_cm: float
    skate_percent: float
    bone_length_variance: float   # mm^2

    def as_dict(self):
        return asdict(self)


@dataclass
class ReconReport:
    bone_length_diff_mm: float
    jitter_diff_m_per_s2: float
    fid: float | None = None

    def as_dict(self):
        return asdict(self)


def _positions(motion):
    pos = np.asarray(getattr(motion, "positions", motion), dtype=np.float64)
    if pos.ndim != 3 or pos.shape[-1] != 3:
        raise InvalidArgument("expected joint positions of shape (T, J, 3)")
    return pos


def lowest_heights(motion):
    """(T,) height of the lowest joint per frame."""
    return _positions(motion)[..., 1].min(axis=-1)


def foot_speeds(motion, foot_joints=FOOT_JOINTS):
    """(T, F) horizontal displacement from t to t+1; the last frame repeats."""
    feet = _positions(motion)[:, list(foot_joints)]
    d = np.linalg.norm((feet[1:] - feet[:-1])[..., [0, 2]], axis=-1)
    return np.concatenate([d, d[-1:]], axis=0)


def bone_lengths_over_time(motion, parents):
    pos = _positions(motion)
    child = np.arange(1, len(parents))
    par = np.asarray(parents)[1:]
    return np.linalg.norm(pos[:, child] - pos[:, par], axis=-1)        # (T, J-1), bone j at column j-1


def physics_metrics(motion, skeleton, contact_height=CONTACT_HEIGHT, skate_velocity=SKATE_VELOCITY,
                    skate_over_contact_frames=False) -> PhysicsReport:
    pos = _positions(motion)
    t = pos.shape[0]
    if t < 2:
        raise InvalidArgument("physics metrics need at least two frames")
    low = lowest_heights(pos)
    penetrate = np.maximum(0.0, -low).mean() * 100.0
    floating = np.maximum(0.0, low).mean() * 100.0
    heights = pos[:, list(FOOT_JOINTS), 1]
    contact = heights < contact_height
    skating = np.any(contact & (foot_speeds(pos) > skate_velocity), axis=1)
    denom = max(int(np.any(contact, axis=1).sum()), 1) if skate_over_contact_frames else t
    skate = 100.0 * skating.sum() / denom
    lengths = bone_lengths_over_time(pos, skeleton.parents)[:, np.asarray(LIMB_BONES) - 1] * 1000.0
    variance = lengths.var(axis=0).mean()
    return PhysicsReport(float(penetrate), float(floating), float(skate), float(variance))


def recon_metrics(gt, recon, skeleton, fps=20) -> ReconReport:
    a, b = _positions(gt), _positions(recon)
    if a.shape != b.shape:
        raise InvalidArgument(f"motions differ in shape: {a.shape} vs {b.shape}")
    la = bone_lengths_over_time(a, skeleton.parents)
    lb = bone_lengths_over_time(b, skeleton.parents)
    bone = np.abs(lb - la).mean() * 1000.0

    def jitter(p):
        if p.shape[0] < 3:
            return 0.0
        acc = p[2:] - 2 * p[1:-1] + p[:-2]
        return np.linalg.norm(acc, axis=-1).mean() * fps ** 2

    return ReconReport(float(bone), float(abs(jitter(b) - jitter(a))))


def attribute_error(beta_hat, beta_gt, model: ShapeModel):
    """Per-attribute absolute difference in cm (6,)."""
    return np.abs(measure_attributes(model, beta_hat).as_array() - measure_attributes(model, beta_gt).as_array())


# ---- distribution metrics --------------------------------------------------------

def _sqrtm_psd(m):
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(feats_a, feats_b, jitter=1e-6):
    """Fréchet distance between Gaussian fits of two feature sets (rows are samples)."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise InvalidArgument("need at least two samples per set")
    if a.shape[1] != b.shape[1]:
        raise InvalidArgument("feature dimensions differ")
    mu_a, mu_b = a.mean(0), b.mean(0)
    ca = np.atleast_2d(np.cov(a, rowvar=False))
    cb = np.atleast_2d(np.cov(b, rowvar=False))
    eye = np.eye(ca.shape[0])
    if np.linalg.matrix_rank(ca) < ca.shape[0]:
        ca = ca + jitter * eye
    if np.linalg.matrix_rank(cb) < cb.shape[0]:
        cb = cb + jitter * eye
    # tr((Ca Cb)^1/2) computed through the symmetric form Ca^1/2 Cb Ca^1/2
    ra = _sqrtm_psd(ca)
    cross = np.trace(_sqrtm_psd(ra @ cb @ ra))
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca) + np.trace(cb) - 2 * cross)
    return max(d, 0.0)


def retrieval_metrics(text_feats, motion_feats, pool_size=32, seed=0):
    """R-precision top-1/2/3 within shuffled pools, and the matched-pair distance."""
    t = np.asarray(text_feats, dtype=np.float64)
    m = np.asarray(motion_feats, dtype=np.float64)
    if t.shape != m.shape:
        raise InvalidArgument("text and motion features must be aligned row for row")
    n = t.shape[0]
    if n < pool_size:
        raise InvalidArgument(f"need at least {pool_size} pairs, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    hits = np.zeros(3)
    queries = 0
    for start in range(0, n - pool_size + 1, pool_size):
        idx = order[start:start + pool_size]
        dist = np.linalg.norm(t[idx][:, None] - m[idx][None], axis=-1)
        true = dist[np.arange(pool_size), np.arange(pool_size)]
        rank = (dist < true[:, None]).sum(1)
        for k in range(3):
            hits[k] += np.sum(rank <= k)
        queries += pool_size
    top = hits / queries
    mm = float(np.linalg.norm(t - m, axis=-1).mean())
    return float(top[0]), float(top[1]), float(top[2]), mm


def diversity(motion_feats, subset=300, seed=0):
    f = np.asarray(motion_feats, dtype=np.float64)
    n = f.shape[0]
    if n < 4:
        raise InvalidArgument("diversity needs at least 4 samples")
    size = min(subset, n // 2)
    perm = np.random.default_rng(seed).permutation(n)
    a, b = f[perm[:size]], f[perm[size:2 * size]]
    return float(np.linalg.norm(a - b, axis=-1).mean())


def summarize(values):
    """Mean and 95% confidence half-width (1.96 std / sqrt n) of repeated runs."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    ci = 1.96 * v.std(ddof=1) / math.sqrt(n) if n > 1 else 0.0
    return {"mean": float(v.mean()), "ci95": float(ci), "n": n}


# ---- learned evaluator -------------------------------------------------------------

@dataclass
class ExtractorConfig:
    embed_dim: int = 128
    hidden: int = 128
    word_dim: int = 64
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    temperature: float = 0.1


class MotionEncoder(nn.Module):
    def __init__(self, cfg: ExtractorConfig):
        super().__init__()
        h = cfg.hidden
        self.net = nn.Sequential(nn.Conv1d(FEATURE_DIM, h, 4, 2, 1), nn.LeakyReLU(0.2),
                                 nn.Conv1d(h, h, 4, 2, 1), nn.LeakyReLU(0.2))
        self.out = nn.Linear(h, cfg.embed_dim)

    def forward(self, x):                       # (B, T, 263) z-scored
        return F.normalize(self.out(self.net(x.transpose(1, 2)).mean(-1)), dim=-1)


class TextEncoder(nn.Module):
    def __init__(self, vocab_size, cfg: ExtractorConfig):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, cfg.word_dim, padding_idx=0)
        self.gru = nn.GRU(cfg.word_dim, cfg.hidden // 2, batch_first=True, bidirectional=True)
        self.out = nn.Linear(cfg.hidden, cfg.embed_dim)

    def forward(self, ids, lengths):
        packed = nn.utils.rnn.pack_padded_sequence(self.embed(ids), lengths.cpu(), batch_first=True,
                                                   enforce_sorted=False)
        _, h = self.gru(packed)
        return F.normalize(self.out(torch.cat([h[0], h[1]], -1)), dim=-1)


class FeatureExtractor:
    """Paired text and motion encoders mapping into one embedding space."""

    def __init__(self, cfg: ExtractorConfig, vocab: WordVocab, stats: FeatureStats,
                 motion: MotionEncoder | None = None, text: TextEncoder | None = None):
        self.cfg, self.vocab, self.stats = cfg, vocab, stats
        self.motion = motion or MotionEncoder(cfg)
        self.text = text or TextEncoder(len(vocab), cfg)

    def _text_batch(self, texts):
        ids = [self.vocab.encode(t) or [1] for t in texts]
        lengths = torch.tensor([len(i) for i in ids])
        pad = torch.zeros(len(ids), int(lengths.max()), dtype=torch.long)
        for k, i in enumerate(ids):
            pad[k, :len(i)] = torch.tensor(i)
        return pad, lengths

    def _motion_batch(self, motions):
        arr = [np.asarray(getattr(m, "data", m), dtype=np.float32) for m in motions]
        mean = self.stats.mean.astype(np.float32)
        std = self.stats.std.astype(np.float32)
        t = min(a.shape[0] for a in arr)
        return torch.as_tensor(np.stack([(a[:t] - mean) / std for a in arr]))

    @torch.no_grad()
    def embed_motions(self, motions):
        """Embeds each clip at its own length."""
        self.motion.eval()
        rows = [self.motion(self._motion_batch([m]))[0] for m in motions]
        return torch.stack(rows).numpy().astype(np.float64)

    @torch.no_grad()
    def embed_texts(self, texts):
        self.text.eval()
        return self.text(*self._text_batch(texts)).numpy().astype(np.float64)

    def save(self, path):
        ckpt.save_archive(path, {"config": {"kind": "extractor", **asdict(self.cfg)},
                                 "vocab": self.vocab.to_list(), "stats": self.stats.to_dict()},
                          {"motion": self.motion.state_dict(), "text": self.text.state_dict()})

    @classmethod
    def load(cls, path):
        docs, tensors = ckpt.load_archive(path)
        conf = dict(docs["config"])
        conf.pop("kind", None)
        cfg = ExtractorConfig(**conf)
        ext = cls(cfg, WordVocab.from_list(docs["vocab"]), FeatureStats.from_dict(docs["stats"]))
        ckpt.load_state(ext.motion, tensors["motion"])
        ckpt.load_state(ext.text, tensors["text"])
        return ext


def train_feature_extractor(texts, motions, config: ExtractorConfig | None = None, seed=0) -> FeatureExtractor:
    """Symmetric InfoNCE over matched (text, shape-aware features) pairs."""
    cfg = config or ExtractorConfig()
    if len(texts) != len(motions) or len(texts) < 2:
        raise InvalidArgument("need at least two aligned text/motion pairs")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    arrays = [np.asarray(getattr(m, "data", m)) for m in motions]
    ext = FeatureExtractor(cfg, WordVocab.build(texts), compute_stats(arrays))
    params = list(ext.motion.parameters()) + list(ext.text.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    n = len(texts)
    bs = min(cfg.batch_size, n)
    ext.motion.train()
    ext.text.train()
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(0, n - bs + 1, bs):
            idx = perm[s:s + bs]
            zm = ext.motion(ext._motion_batch([arrays[i] for i in idx]))
            zt = ext.text(*ext._text_batch([texts[i] for i in idx]))
            logits = zt @ zm.T / cfg.temperature
            target = torch.arange(len(idx))
            loss = 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))
            opt.zero_grad()
            loss.backward()
            opt.step()
    return ext
