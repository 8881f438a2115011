"""Shape-aware FSQ autoencoder: model, losses, training loop and tokenization.

The encoder sees shape-normalized features; the decoder receives the quantized
latents together with a projected shape vector and emits shape-aware features.
All tensors in the model live in z-scored feature space; the physical losses
undo the z-scoring and recover joints differentiably.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .errors import InvalidArgument, InvalidState, ModelConfigurationError, TrainingDivergence
from .fsq import FSQ, FSQConfig
from .motion_repr import (FEATURE_DIM, ROT_SLICE, FeatureStats, MotionFeatures, apply_stats,
                          compute_stats, recover_positions)
from .shape_body import FOOT_JOINTS, PARENTS, ShapeModel, default_shape_model, sample_shape

DOWNSAMPLE = 4


@dataclass
class SAVAEConfig:
    frames: int = 64
    width: int = 512
    res_depth: int = 3
    latent_dim: int = 512
    levels: list = field(default_factory=lambda: [8, 5, 5, 5])
    num_betas: int = 10
    conditioning: str = "prepend"          # prepend | broadcast
    lambda_rot: float = 1.0
    lambda_float: float = 10.0
    lambda_slide: float = 10.0
    lambda_bone: float = 10.0
    q_percent: float = 10.0
    adam_betas: tuple = (0.9, 0.99)
    lr: float = 2e-4
    lr_final: float = 1e-5
    lr_decay_step: int = 16000
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    ema_decay: float = 0.99
    batch_size: int = 32
    iterations: int = 20000
    contact_height: float = 0.05
    log_every: int = 50

    def __post_init__(self):
        self.levels = [int(x) for x in self.levels]
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if self.frames % DOWNSAMPLE or self.frames < DOWNSAMPLE:
            raise ModelConfigurationError(f"frames must be a positive multiple of {DOWNSAMPLE}")
        if min(self.lambda_rot, self.lambda_float, self.lambda_slide, self.lambda_bone) < 0:
            raise ModelConfigurationError("loss weights must be non-negative")
        if not 0 <= self.q_percent <= 100:
            raise ModelConfigurationError("q_percent must lie in [0, 100]")
        if self.conditioning not in ("prepend", "broadcast"):
            raise ModelConfigurationError(f"unknown conditioning {self.conditioning!r}")
        if not 0 <= self.ema_decay <= 1:
            raise ModelConfigurationError("ema_decay must lie in [0, 1]")
        if self.batch_size < 1 or self.iterations < 0:
            raise ModelConfigurationError("batch_size must be >= 1 and iterations >= 0")

    @property
    def tokens_per_clip(self):
        return self.frames // DOWNSAMPLE


# ---- network -----------------------------------------------------------------

class ResBlock(nn.Module):
    def __init__(self, width, dilation):
        super().__init__()
        self.conv1 = nn.Conv1d(width, width, 3, padding=dilation, dilation=dilation)
        self.conv2 = nn.Conv1d(width, width, 1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(F.relu(x))))


def _res_stack(width, depth):
    return nn.Sequential(*[ResBlock(width, 3 ** i) for i in range(depth)][::-1])


class Encoder(nn.Module):
    def __init__(self, cfg: SAVAEConfig):
        super().__init__()
        w = cfg.width
        layers = [nn.Conv1d(FEATURE_DIM, w, 3, padding=1), nn.ReLU()]
        for _ in range(2):
            layers += [nn.Conv1d(w, w, 4, stride=2, padding=1), _res_stack(w, cfg.res_depth)]
        layers.append(nn.Conv1d(w, cfg.latent_dim, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):                      # (B, T, 263) -> (B, T/4, d)
        return self.net(x.transpose(1, 2)).transpose(1, 2)


class Decoder(nn.Module):
    def __init__(self, cfg: SAVAEConfig):
        super().__init__()
        w = cfg.width
        layers = [nn.Conv1d(cfg.latent_dim, w, 3, padding=1), nn.ReLU()]
        for _ in range(2):
            layers += [_res_stack(w, cfg.res_depth), nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv1d(w, w, 3, padding=1)]
        layers += [nn.Conv1d(w, w, 3, padding=1), nn.ReLU(), nn.Conv1d(w, FEATURE_DIM, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, z):                      # (B, L, d) -> (B, 4L, 263)
        return self.net(z.transpose(1, 2)).transpose(1, 2)


class ShapeAwareVAE(nn.Module):
    def __init__(self, cfg: SAVAEConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.quantizer = FSQ(FSQConfig(cfg.levels, cfg.latent_dim))
        self.decoder = Decoder(cfg)
        self.shape_proj = nn.Sequential(nn.Linear(cfg.num_betas, cfg.latent_dim), nn.SiLU(),
                                        nn.Linear(cfg.latent_dim, cfg.latent_dim))

    def encode(self, xn):
        if xn.shape[-2] % DOWNSAMPLE:
            raise InvalidArgument(f"frame count {xn.shape[-2]} is not divisible by {DOWNSAMPLE}")
        return self.encoder(xn)

    def quantize(self, z):
        return self.quantizer(z)

    def decode(self, zq, beta):
        shape = self.shape_proj(beta.to(zq.dtype))[:, None, :]
        if self.cfg.conditioning == "prepend":
            out = self.decoder(torch.cat([shape, zq], dim=1))
            return out[:, DOWNSAMPLE:]
        return self.decoder(zq + shape)

    def forward(self, xn, beta):
        zq, idx = self.quantize(self.encode(xn))
        return self.decode(zq, beta), idx


# ---- losses ------------------------------------------------------------------

def reconstruction_loss(x, x_hat, lambda_rot=1.0):
    """Smooth-L1 over all dims plus a weighted smooth-L1 over the rotation slice."""
    if x.shape != x_hat.shape:
        raise InvalidArgument(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    loss = F.smooth_l1_loss(x_hat, x, beta=1.0)
    if lambda_rot:
        loss = loss + lambda_rot * F.smooth_l1_loss(x_hat[..., ROT_SLICE], x[..., ROT_SLICE], beta=1.0)
    return loss


_CHILD = torch.arange(1, len(PARENTS))
_PARENT = torch.tensor(PARENTS[1:])


def rest_bone_lengths(betas, model: ShapeModel | None = None):
    """(..., 21) rest lengths of the non-root bones for a batch of betas."""
    model = model or default_shape_model()
    return np.linalg.norm(model.offsets_for(betas), axis=-1)[..., 1:]


def contact_mask_from(raw, height=0.05):
    """(B, T-1, 4) float mask of foot joints below ``height`` (non-differentiable)."""
    with torch.no_grad():
        pos = recover_positions(raw)
        return (pos[:, :-1, list(FOOT_JOINTS), 1] < height).to(raw.dtype)


def physical_losses(raw, rest_lengths, contact_height=0.05, contact_mask=None, reduce=True):
    """Float, slide and bone losses of raw (un-z-scored) features (B, T, 263).

    ``contact_mask`` defaults to the height test on the detached prediction.
    With ``reduce=False`` each term is returned per batch item.
    """
    pos = recover_positions(raw)
    lowest = pos[..., 1].min(dim=-1).values
    l_float = F.relu(lowest).mean(-1)
    feet = pos[:, :, list(FOOT_JOINTS)]
    speed = torch.linalg.norm(feet[:, 1:, :, [0, 2]] - feet[:, :-1, :, [0, 2]], dim=-1)
    mask = contact_mask if contact_mask is not None else contact_mask_from(raw, contact_height)
    l_slide = (speed * mask).sum((1, 2)) / mask.sum((1, 2)).clamp(min=1.0)
    bones = torch.linalg.norm(pos[:, :, _CHILD] - pos[:, :, _PARENT], dim=-1)
    rest = torch.as_tensor(rest_lengths, dtype=raw.dtype)
    l_bone = (bones - rest[:, None, :]).abs().mean((1, 2))
    if reduce:
        return l_float.mean(), l_slide.mean(), l_bone.mean()
    return l_float, l_slide, l_bone


def total_vq_loss(parts, lambda_float=10.0, lambda_slide=10.0, lambda_bone=10.0):
    """L_r + weighted physical terms; any non-finite part raises TrainingDivergence."""
    for name, value in parts.items():
        if not torch.all(torch.isfinite(torch.as_tensor(value))):
            raise TrainingDivergence(f"non-finite loss component {name}",
                                     {k: float(torch.as_tensor(v).detach()) for k, v in parts.items()})
    return (parts["recon"] + lambda_float * parts["float"] + lambda_slide * parts["slide"]
            + lambda_bone * parts["bone"])


# ---- data --------------------------------------------------------------------

@dataclass
class MotionCorpus:
    """In-memory training data: shape-normalized and shape-aware features with betas."""
    xn: list
    xr: list
    betas: np.ndarray
    texts: list = field(default_factory=list)
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if not (len(self.xn) == len(self.xr) == len(self.betas)):
            raise InvalidArgument("corpus arrays have mismatched lengths")
        for a, b in zip(self.xn, self.xr):
            if a.shape != b.shape or a.shape[-1] != FEATURE_DIM:
                raise InvalidArgument("each item needs matching (T, 263) X^N and X^R arrays")

    def __len__(self):
        return len(self.xn)

    @classmethod
    def from_records(cls, records):
        xn, xr = [], []
        for r in records:
            xn.append(np.asarray(r.normalized_features().data, dtype=np.float32))
            xr.append(np.asarray(r.features().data, dtype=np.float32))
        return cls(xn, xr, np.stack([r.beta for r in records]), [r.text for r in records],
                   [r.id for r in records])

    def subset(self, idx):
        idx = list(idx)
        return MotionCorpus([self.xn[i] for i in idx], [self.xr[i] for i in idx], self.betas[idx],
                            [self.texts[i] for i in idx] if self.texts else [],
                            [self.ids[i] for i in idx] if self.ids else [])


# ---- checkpoint --------------------------------------------------------------

class VAECheckpoint:
    """Trained autoencoder: raw and EMA weights, config, feature stats and rng state."""

    def __init__(self, config: SAVAEConfig, model: ShapeAwareVAE, ema: ShapeAwareVAE,
                 stats: FeatureStats, step=0, rng_state=None, history=None,
                 shape_model: ShapeModel | None = None):
        self.config = config
        self.model = model
        self.ema = ema
        self.stats = stats
        self.step = step
        self.rng_state = rng_state or {}
        self.history = history or []
        self.shape_model = shape_model or default_shape_model()

    def quantizer_size(self):
        return math.prod(self.config.levels)

    def inference_model(self):
        if self.step <= 0:
            raise InvalidState("autoencoder checkpoint has not been trained")
        return self.ema.eval()

    def save(self, path):
        docs = {"config": {"kind": "sa_vae", **asdict(self.config)},
                "meta": {"step": self.step, "history_tail": self.history[-20:]},
                "stats": self.stats.to_dict(), "rng": self.rng_state,
                "shape_model": self.shape_model.to_dict()}
        ckpt.save_archive(path, docs, {"raw": self.model.state_dict(), "ema": self.ema.state_dict()})

    @classmethod
    def load(cls, path):
        docs, tensors = ckpt.load_archive(path)
        conf = dict(docs["config"])
        if conf.pop("kind", None) != "sa_vae":
            raise InvalidState(f"{path} is not an autoencoder checkpoint")
        cfg = SAVAEConfig(**conf)
        model, ema = ShapeAwareVAE(cfg), ShapeAwareVAE(cfg)
        ckpt.load_state(model, tensors["raw"])
        ckpt.load_state(ema, tensors["ema"])
        return cls(cfg, model, ema, FeatureStats.from_dict(docs["stats"]), docs["meta"]["step"],
                   docs.get("rng", {}), docs["meta"].get("history_tail", []),
                   ShapeModel.from_dict(docs["shape_model"]))


# ---- training ----------------------------------------------------------------

@dataclass
class TrainInstrumentation:
    augmented_items: int = 0
    unaugmented_items: int = 0
    recon_grad_norms: list = field(default_factory=list)


def _lr_at(cfg, step):
    return cfg.lr if step < cfg.lr_decay_step else cfg.lr_final


@torch.no_grad()
def ema_update(ema: nn.Module, model: nn.Module, decay):
    shadow, params = list(ema.parameters()), [p.detach() for p in model.parameters()]
    torch._foreach_mul_(shadow, decay)
    torch._foreach_add_(shadow, params, alpha=1.0 - decay)
    for e, b in zip(ema.buffers(), model.buffers()):
        e.copy_(b)


def _crop(rng, arrays, frames):
    t = arrays[0].shape[0]
    if t < frames:
        raise InvalidArgument(f"clip of {t} frames is shorter than the crop length {frames}")
    s = int(rng.integers(0, t - frames + 1))
    return [a[s:s + frames] for a in arrays]


def train_vae(corpus: MotionCorpus, config: SAVAEConfig, rng_seed=0, stats: FeatureStats | None = None,
              callback=None, log_path=None, instrument: TrainInstrumentation | None = None,
              max_seconds=None, shape_model: ShapeModel | None = None,
              resume: VAECheckpoint | None = None, probe=None, probe_every=250) -> VAECheckpoint:
    """Train from scratch, or continue from ``resume`` for ``config.iterations`` more steps.

    ``callback(step, record)`` may return True to stop early. ``record`` holds
    the step's loss components; it is also appended to the JSON-lines log every
    ``log_every`` steps when ``log_path`` is given. Resuming keeps the weights,
    EMA shadow, stats and step count but starts a fresh optimizer.
    ``probe(checkpoint)`` runs every ``probe_every`` steps on a live view of
    the weights and may also return True to stop.
    """
    if len(corpus) == 0:
        raise InvalidArgument("empty training corpus")
    shape_model = shape_model or default_shape_model()
    if shape_model.num_betas != config.num_betas:
        raise ModelConfigurationError("config.num_betas does not match the shape model")
    torch.manual_seed(rng_seed)
    rng = np.random.default_rng(rng_seed)
    if resume is not None:
        stats = stats or resume.stats
        shape_model = resume.shape_model
    stats = stats or compute_stats(list(corpus.xn) + list(corpus.xr))
    model = ShapeAwareVAE(config)
    offset = 0
    if resume is not None:
        try:
            model.load_state_dict(resume.model.state_dict())
        except RuntimeError as exc:
            raise ModelConfigurationError(f"cannot resume: architecture differs ({exc})") from None
        offset = resume.step
    ema = copy.deepcopy(model)
    if resume is not None:
        ema.load_state_dict(resume.ema.state_dict())
    for p in ema.parameters():
        p.requires_grad_(False)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, betas=config.adam_betas,
                            weight_decay=config.weight_decay, foreach=True)
    mean = torch.as_tensor(stats.mean, dtype=torch.float32)
    std = torch.as_tensor(stats.std, dtype=torch.float32)
    rest_all = rest_bone_lengths(corpus.betas, shape_model)
    n_aug = math.floor(config.q_percent / 100.0 * config.batch_size)
    log_fh = open(log_path, "a") if log_path else None
    history = list(resume.history) if resume is not None else []
    start = time.monotonic()
    step = offset
    try:
        for step in range(offset + 1, offset + config.iterations + 1):
            idx = rng.integers(0, len(corpus), size=config.batch_size)
            crops = [_crop(rng, (corpus.xn[i], corpus.xr[i]), config.frames) for i in idx]
            xn = (torch.as_tensor(np.stack([c[0] for c in crops])) - mean) / std
            xr = (torch.as_tensor(np.stack([c[1] for c in crops])) - mean) / std
            betas = corpus.betas[idx].copy()
            rest = rest_all[idx].copy()
            aug = np.zeros(config.batch_size, dtype=bool)
            if n_aug:
                aug[config.batch_size - n_aug:] = True
                betas[aug] = sample_shape(rng, config.num_betas, size=n_aug)
                rest[aug] = rest_bone_lengths(betas[aug], shape_model)
            keep = torch.as_tensor(~aug)
            for g in opt.param_groups:
                g["lr"] = _lr_at(config, step)

            x_hat, _ = model(xn, torch.as_tensor(betas, dtype=torch.float32))
            raw_hat = x_hat * std + mean
            mask = contact_mask_from(raw_hat, config.contact_height)
            if keep.any():
                gt_mask = contact_mask_from(xr[keep] * std + mean, config.contact_height)
                mask = mask.clone()
                mask[keep] = gt_mask
                recon = reconstruction_loss(xr[keep], x_hat[keep], config.lambda_rot)
            else:
                recon = torch.zeros(())
            lf, ls, lb = physical_losses(raw_hat, rest, config.contact_height, mask, reduce=False)
            parts = {"recon": recon,
                     "float": lf[keep].mean() if keep.any() else torch.zeros(()),
                     "slide": ls.mean(), "bone": lb.mean()}
            try:
                loss = total_vq_loss(parts, config.lambda_float, config.lambda_slide, config.lambda_bone)
            except TrainingDivergence as exc:
                exc.snapshot.update(step=step, batch=[int(i) for i in idx], lr=_lr_at(config, step))
                raise
            if instrument is not None:
                instrument.augmented_items += int(aug.sum())
                instrument.unaugmented_items += int((~aug).sum())
                if recon.requires_grad:
                    grads = torch.autograd.grad(recon, list(model.parameters()), retain_graph=True,
                                                allow_unused=True)
                    norm = math.sqrt(sum(float((g ** 2).sum()) for g in grads if g is not None))
                else:
                    norm = 0.0
                instrument.recon_grad_norms.append(norm)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip > 0:
                nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            ema_update(ema, model, config.ema_decay)

            record = {"step": step, "loss": float(loss.detach()),
                      **{k: float(v.detach()) for k, v in parts.items()},
                      "lr": _lr_at(config, step), "augmented": int(aug.sum())}
            history.append(record)
            if log_fh and (step % config.log_every == 0 or step == 1):
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if callback is not None and callback(step, record):
                break
            if probe is not None and step % probe_every == 0:
                view = VAECheckpoint(config, model, ema, stats, step, shape_model=shape_model)
                stop = probe(view)
                model.train()
                if stop:
                    break
            if max_seconds is not None and time.monotonic() - start > max_seconds:
                break
    finally:
        if log_fh:
            log_fh.close()
    rng_state = {"numpy": rng.bit_generator.state, "seed": rng_seed}
    return VAECheckpoint(config, model, ema, stats, step, rng_state, history, shape_model)


# ---- inference helpers ---------------------------------------------------------

def _as_batch(data, stats):
    x = torch.as_tensor(np.asarray(data, dtype=np.float32))
    return apply_stats(x, stats)[None]


@torch.no_grad()
def tokenize_motion(xn: MotionFeatures, checkpoint: VAECheckpoint) -> np.ndarray:
    """Token indices (T/4,) of a shape-normalized clip."""
    if checkpoint is None:
        raise InvalidState("no autoencoder checkpoint")
    if not xn.is_shape_normalized:
        raise InvalidArgument("the encoder only accepts shape-normalized features")
    model = checkpoint.inference_model()
    _, idx = model.quantize(model.encode(_as_batch(xn.data, checkpoint.stats)))
    return idx[0].numpy().astype(np.int64)


@torch.no_grad()
def decode_tokens(indices, beta, checkpoint: VAECheckpoint) -> MotionFeatures:
    """Shape-aware raw features (4*len(indices), 263) for tokens and a beta."""
    model = checkpoint.inference_model()
    idx = torch.as_tensor(np.asarray(indices), dtype=torch.long)
    if idx.ndim != 1 or len(idx) == 0:
        raise InvalidArgument("decode_tokens expects a non-empty 1-D index sequence")
    beta = torch.as_tensor(checkpoint.shape_model.check_beta(beta), dtype=torch.float32)[None]
    out = model.decode(model.quantizer.dequantize(idx)[None], beta)[0]
    return MotionFeatures(apply_stats(out, checkpoint.stats, "inverse").double().numpy(), False)


@torch.no_grad()
def reconstruct(xn: MotionFeatures, beta, checkpoint: VAECheckpoint) -> MotionFeatures:
    return decode_tokens(tokenize_motion(xn, checkpoint), beta, checkpoint)


@torch.no_grad()
def reconstruction_error(corpus: MotionCorpus, checkpoint: VAECheckpoint, lambda_rot=0.0, use_ema=True):
    """Mean smooth-L1 between z-scored X^R and the reconstruction over a corpus."""
    model = checkpoint.ema if use_ema else checkpoint.model
    model.eval()
    mean = torch.as_tensor(checkpoint.stats.mean, dtype=torch.float32)
    std = torch.as_tensor(checkpoint.stats.std, dtype=torch.float32)
    total = 0.0
    for xn, xr, b in zip(corpus.xn, corpus.xr, corpus.betas):
        x_hat, _ = model((torch.as_tensor(xn) - mean)[None] / std, torch.as_tensor(b, dtype=torch.float32)[None])
        total += float(reconstruction_loss((torch.as_tensor(xr) - mean)[None] / std, x_hat, lambda_rot))
    return total / len(corpus)


def load_vae(path) -> VAECheckpoint:
    return VAECheckpoint.load(Path(path))
