"""Command line: synth-data, train-vae, train-lm, reconstruct, generate, evaluate, plot."""

from __future__ import annotations

import argparse
import json
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, plots
from .config import RunConfig, config_schema, load_config
from .datagen import load_dataset, synth_dataset
from .errors import (ConfigError, InvalidArgument, MissingCheckpoint, ModelConfigurationError,
                     ShapeMotionError, TrainingDivergence)
from .eval_metrics import FeatureExtractor, recon_metrics, train_feature_extractor
from .lm_predictor import PredictorCheckpoint, PredictorCorpus, generate_motion, train_predictor
from .motion_repr import features_from_joints, joints_from_features, write_samo
from .pipeline import evaluate_repeated
from .sa_vae import MotionCorpus, VAECheckpoint, reconstruct, train_vae
from .shape_body import measure_attributes, skeleton_from_shape

EXIT_OK, EXIT_ERROR, EXIT_MISSING, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3, 4


def _out_dir(args, cfg: RunConfig, name):
    out = Path(args.out) if args.out else cfg.output_root() / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_meta(out: Path, command, cfg: RunConfig, argv, extra=None):
    meta = {
        "command": command, "argv": list(argv), "seed": cfg.seed, "profile": cfg.profile,
        "config_hash": cfg.digest(), "config": cfg.to_dict(),
        "versions": {"shapemotion": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "torch": torch.__version__},
    }
    meta.update(extra or {})
    (out / "run.json").write_text(json.dumps(meta, indent=1, sort_keys=True, default=list))


def _require(path, what):
    if path is None or not Path(path).exists():
        raise MissingCheckpoint(f"{what} not found: {path}")
    return Path(path)


def _records(args, cfg):
    data = _require(args.data, "dataset")
    return load_dataset(data, exclude_tags=cfg.eval.exclude_tags)


def cmd_synth_data(args, cfg):
    out = _out_dir(args, cfg, "data")
    manifest = synth_dataset(cfg.data, out)
    _write_run_meta(out, "synth-data", cfg, args.argv, {"manifest": str(manifest)})
    return {"manifest": str(manifest), "n_samples": cfg.data.n_samples}


def cmd_train_vae(args, cfg):
    records = _records(args, cfg)
    out = _out_dir(args, cfg, "vae")
    corpus = MotionCorpus.from_records(records)
    log = out / "train_vae.jsonl"
    log.unlink(missing_ok=True)
    checkpoint = train_vae(corpus, cfg.vae, cfg.seed, log_path=log)
    path = out / "vae.ckpt"
    checkpoint.save(path)
    _write_run_meta(out, "train-vae", cfg, args.argv, {"steps": checkpoint.step})
    return {"checkpoint": str(path), "steps": checkpoint.step, "final": checkpoint.history[-1]}


def cmd_train_lm(args, cfg):
    vae = VAECheckpoint.load(_require(args.vae, "autoencoder checkpoint"))
    records = _records(args, cfg)
    out = _out_dir(args, cfg, "lm")
    corpus = PredictorCorpus.from_motion_corpus(MotionCorpus.from_records(records), vae)
    log = out / "train_lm.jsonl"
    log.unlink(missing_ok=True)
    checkpoint = train_predictor(corpus, cfg.lm, vae.quantizer_size(), cfg.seed, log_path=log)
    path = out / "lm.ckpt"
    checkpoint.save(path)
    _write_run_meta(out, "train-lm", cfg, args.argv, {"steps": checkpoint.step})
    return {"checkpoint": str(path), "steps": checkpoint.step}


def cmd_reconstruct(args, cfg):
    vae = VAECheckpoint.load(_require(args.vae, "autoencoder checkpoint"))
    records = _records(args, cfg)
    out = _out_dir(args, cfg, "reconstruct")
    picks = records if args.limit is None else records[:args.limit]
    reports = {}
    for r in picks:
        feats = reconstruct(r.normalized_features(), r.beta, vae)
        skel = skeleton_from_shape(vae.shape_model, r.beta)
        write_samo(out / f"{r.id}.samo", feats.data)
        gt = joints_from_features(r.features(), skel)
        rec = joints_from_features(feats, skel)
        reports[r.id] = recon_metrics(gt, rec, skel).as_dict()
    summary = {k: float(np.mean([v[k] for v in reports.values() if v[k] is not None]))
               for k in ("bone_length_diff_mm", "jitter_diff_m_per_s2")}
    (out / "reconstruction.json").write_text(json.dumps({"per_record": reports, "mean": summary}, indent=1))
    _write_run_meta(out, "reconstruct", cfg, args.argv)
    return summary


def cmd_generate(args, cfg):
    lm = PredictorCheckpoint.load(_require(args.lm, "predictor checkpoint"))
    vae = VAECheckpoint.load(_require(args.vae, "autoencoder checkpoint"))
    out = _out_dir(args, cfg, "generate")
    beta, motion, report = generate_motion(args.text, lm, vae, args.sampling, seed=cfg.seed)
    skel = skeleton_from_shape(vae.shape_model, beta)
    write_samo(out / "motion.samo", features_from_joints(motion, skel).data)
    np.save(out / "joints.npy", motion.positions.astype("<f4"))
    sidecar = {"beta": beta.tolist(), "attributes": measure_attributes(vae.shape_model, beta).as_dict(),
               "tokens": report.tokens, "token_count": report.token_count, "frames": motion.num_frames,
               "truncated": report.truncated, "malformed": report.malformed, "dropped_ids": report.dropped_ids,
               "text": args.text}
    (out / "generation.json").write_text(json.dumps(sidecar, indent=1))
    if args.plot:
        plots.trajectory_strip(motion.positions, skel.parents, out / "trajectory.png")
    _write_run_meta(out, "generate", cfg, args.argv)
    return sidecar


def cmd_evaluate(args, cfg):
    lm = PredictorCheckpoint.load(_require(args.lm, "predictor checkpoint"))
    vae = VAECheckpoint.load(_require(args.vae, "autoencoder checkpoint"))
    records = _records(args, cfg)
    out = _out_dir(args, cfg, "evaluate")
    if args.extractor:
        extractor = FeatureExtractor.load(_require(args.extractor, "extractor checkpoint"))
    else:
        train = records[:cfg.eval.extractor_samples]
        extractor = train_feature_extractor([r.text for r in train], [r.features().data for r in train],
                                            cfg.extractor, cfg.seed)
        extractor.save(out / "extractor.ckpt")
    prompts = records[:cfg.eval.n_prompts]
    repeats = args.repeats or cfg.eval.repeats
    summary, runs = evaluate_repeated(prompts, lm, vae, extractor, repeats, cfg.eval.sampling, cfg.eval.pool_size)
    (out / "metrics.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    (out / "runs.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in runs))
    _write_run_meta(out, "evaluate", cfg, args.argv, {"repeats": repeats})
    return summary


def cmd_plot(args, cfg):
    out = _out_dir(args, cfg, "plots")
    made = []
    if args.metrics:
        metrics = json.loads(_require(args.metrics, "metrics file").read_text())
        made.append(plots.metric_bars(metrics, out / "metrics.png"))
    for log in args.log or []:
        made.append(plots.loss_curves(_require(log, "training log"), out / f"{Path(log).stem}.png"))
    if args.generation:
        gen = json.loads(_require(args.generation, "generation sidecar").read_text())
        made.append(plots.token_histogram(gen["tokens"], args.codebook_size, out / "tokens.png"))
    if not made:
        raise InvalidArgument("nothing to plot: pass --metrics, --log or --generation")
    return {"plots": [str(p) for p in made]}


def build_parser():
    p = argparse.ArgumentParser(prog="shapemotion", description=__doc__)
    p.add_argument("--config", help="YAML or JSON run config")
    p.add_argument("--profile", choices=["desk", "paper", "smoke"], help="defaults profile")
    p.add_argument("--seed", type=int, help="override the config seed")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--out", help="output directory (default: <output root>/<command>)")
        s.set_defaults(fn=fn)
        return s

    s = add("synth-data", cmd_synth_data, "write a procedural dataset")
    s.add_argument("--n", type=int, help="override data.n_samples")
    s = add("train-vae", cmd_train_vae, "train the shape-aware autoencoder")
    s.add_argument("--data", required=True)
    s = add("train-lm", cmd_train_lm, "train the token predictor")
    s.add_argument("--data", required=True)
    s.add_argument("--vae", required=True)
    s = add("reconstruct", cmd_reconstruct, "reconstruct dataset records through the autoencoder")
    s.add_argument("--data", required=True)
    s.add_argument("--vae", required=True)
    s.add_argument("--limit", type=int)
    s = add("generate", cmd_generate, "generate a motion from text")
    s.add_argument("--text", required=True)
    s.add_argument("--lm", required=True)
    s.add_argument("--vae", required=True)
    s.add_argument("--sampling", choices=["greedy", "top_k"], default="greedy")
    s.add_argument("--plot", action="store_true", help="also render a trajectory strip")
    s = add("evaluate", cmd_evaluate, "physics and retrieval metrics over generated motions")
    s.add_argument("--data", required=True)
    s.add_argument("--lm", required=True)
    s.add_argument("--vae", required=True)
    s.add_argument("--extractor", help="pretrained extractor checkpoint (trained on --data otherwise)")
    s.add_argument("--repeats", type=int)
    s = add("plot", cmd_plot, "render metric bars, loss curves or token usage")
    s.add_argument("--metrics")
    s.add_argument("--log", action="append")
    s.add_argument("--generation")
    s.add_argument("--codebook-size", type=int, default=1000)
    s = add("config-schema", lambda a, c: config_schema(), "print the config key schema and defaults")
    return p


def _fail(code, exc):
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    snapshot = getattr(exc, "snapshot", None)
    if snapshot:
        err["snapshot"] = snapshot
    print(json.dumps(err, default=str), file=sys.stderr)
    return code


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    try:
        cfg = load_config(args.config, args.profile)
        if args.seed is not None:
            cfg.seed = cfg.data.seed = args.seed
        if getattr(args, "n", None):
            cfg.data.n_samples = args.n
        result = args.fn(args, cfg)
    except MissingCheckpoint as exc:
        return _fail(EXIT_MISSING, exc)
    except (ConfigError, ModelConfigurationError) as exc:
        return _fail(EXIT_CONFIG, exc)
    except TrainingDivergence as exc:
        return _fail(EXIT_DIVERGED, exc)
    except ShapeMotionError as exc:
        return _fail(EXIT_ERROR, exc)
    print(json.dumps(result, default=str, indent=1))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
