"""Glue shared by the command line and the test suites: generation-quality evaluation."""

from __future__ import annotations

import numpy as np

from .errors import GenerationFailure, InvalidArgument
from .eval_metrics import (FeatureExtractor, attribute_error, diversity, frechet_distance, physics_metrics,
                           retrieval_metrics, summarize)
from .lm_predictor import PredictorCheckpoint, generate_motion
from .motion_repr import features_from_joints
from .sa_vae import VAECheckpoint
from .shape_body import ATTRIBUTE_NAMES, skeleton_from_shape


def generate_batch(texts, predictor: PredictorCheckpoint, vae: VAECheckpoint, sampling="greedy", seed=0):
    """Generate for every prompt; failures are counted, not raised."""
    out, failures = [], 0
    for i, text in enumerate(texts):
        try:
            beta, motion, report = generate_motion(text, predictor, vae, sampling, seed=seed * 100003 + i)
        except GenerationFailure:
            failures += 1
            out.append(None)
            continue
        out.append((beta, motion, report))
    return out, failures


def evaluate_once(records, predictor, vae, extractor: FeatureExtractor, sampling="top_k", seed=0, pool_size=32):
    """One evaluation pass over dataset records; returns a flat metric dict."""
    texts = [r.text for r in records]
    results, failures = generate_batch(texts, predictor, vae, sampling, seed)
    ok = [i for i, r in enumerate(results) if r is not None]
    if not ok:
        raise GenerationFailure("every prompt failed to generate")
    metrics = {"generation_failures": float(failures)}
    phys = []
    attr = []
    gen_feats = []
    for i in ok:
        beta, motion, _ = results[i]
        skel = skeleton_from_shape(vae.shape_model, beta)
        phys.append(physics_metrics(motion, skel).as_dict())
        attr.append(attribute_error(beta, records[i].beta, vae.shape_model))
        gen_feats.append(features_from_joints(motion, skel).data)
    for key in phys[0]:
        metrics[key] = float(np.mean([p[key] for p in phys]))
    attr = np.mean(attr, axis=0)
    for name, v in zip(ATTRIBUTE_NAMES, attr):
        metrics[f"attr_err_{name}"] = float(v)
    real = extractor.embed_motions([records[i].features().data for i in ok])
    gen = extractor.embed_motions(gen_feats)
    txt = extractor.embed_texts([texts[i] for i in ok])
    metrics["fid"] = frechet_distance(real, gen)
    if len(ok) >= 4:
        metrics["diversity"] = diversity(gen, seed=seed)
    if len(ok) >= pool_size:
        t1, t2, t3, mm = retrieval_metrics(txt, gen, pool_size, seed)
        metrics.update(top1=t1, top2=t2, top3=t3, mm_dist=mm)
    return metrics


def evaluate_repeated(records, predictor, vae, extractor, repeats=1, sampling="top_k", pool_size=32):
    if repeats < 1:
        raise InvalidArgument("repeats must be >= 1")
    runs = [evaluate_once(records, predictor, vae, extractor, sampling, seed=r, pool_size=pool_size)
            for r in range(repeats)]
    keys = sorted(set().union(*runs))
    return {k: summarize([run[k] for run in runs if k in run]) for k in keys}, runs
