"""``colontcn`` command line: synth, train, eval, predict, profile, render, folds-validate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from colontcn import data, model, train
from colontcn.checkpoint import load_checkpoint, save_checkpoint
from colontcn.loss import LossConfig
from colontcn.render import render_svg
from colontcn.seqcore import NumericError, make_rng

logger = logging.getLogger("colontcn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


MODEL_DEFAULTS = {
    "levels": 13,
    "channels": 64,
    "kernel_size": 7,
    "dropout_rate": 0.5,
    "double_conv": True,
    "residual": True,
    "weight_norm": True,
    "use_fr": True,
    "stages": 0,
    "refinement_levels": None,
    "input_dim": None,  # taken from the manifest when null
}

DEFAULT_CONFIG = {
    "model": MODEL_DEFAULTS,
    "loss": asdict(LossConfig()),
    "optim": asdict(train.OptimConfig()),
    "data": {"manifest": None, "fps": data.TARGET_FPS},
    "folds": {"scheme": "5fold", "file": None, "fold": 0, "seed": 0},
    "seed": 0,
    "out": "run",
}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def load_config(path=None, overrides=None):
    """Defaults <- config file <- flag overrides; unknown keys are rejected."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"{path}: {e.strerror or e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, doc)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def build_model_config(section, input_dim=None):
    m = dict(section)
    dim = m.pop("input_dim") or input_dim
    if dim is None:
        raise ConfigError("model.input_dim is unset and no manifest gives it")
    try:
        return model.ModelConfig.colontcn(input_dim=int(dim), num_classes=data.NUM_CLASSES, **m)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid model config: {e}") from None


def _build(cls, section, what):
    try:
        return cls(**section)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {what} config: {e}") from None


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_synth(args):
    spec_doc = {}
    if args.config:
        try:
            spec_doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"{args.config}: {e}") from None
    seed = args.seed if args.seed is not None else spec_doc.get("seed", 0)
    spec_doc["seed"] = seed
    known = {f.name for f in fields(data.SyntheticSpec)}
    unknown = set(spec_doc) - known
    if unknown:
        raise ConfigError(f"unknown synthetic spec keys {sorted(unknown)}")
    try:
        spec = data.SyntheticSpec.from_dict(spec_doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid synthetic spec: {e}") from None
    if args.n < 0:
        raise ConfigError("--n must be >= 0")
    out = Path(args.out or "synthetic")
    seqs = data.generate_synthetic(spec, args.n, make_rng(seed))
    cohorts = {s.video_id: s.cohort for s in seqs}
    folds = {}
    if args.n >= 5:
        f5 = train.make_5fold(cohorts, DEFAULT_CONFIG["folds"]["seed"])
        f4 = train.make_4fold(cohorts)
        folds = {"5fold": {v: f.fold_id for f in f5 for v in f.test},
                 "4fold": {v: f.fold_id for f in f4 for v in f.test}}
    manifest = data.write_dataset(seqs, out, spec.feature_dim, folds)
    if folds:
        train.save_folds(f5, out / "folds_5fold.json")
        train.save_folds(f4, out / "folds_4fold.json")
    _write_json(out / "synthetic_spec.json", spec.to_dict())
    print(f"wrote {len(manifest.videos)} videos to {out}")
    return EXIT_OK


def _resolve_folds(cfg, manifest):
    fc = cfg["folds"]
    cohorts = {v.video_id: v.cohort for v in manifest.videos}
    if fc["file"]:
        folds = train.load_folds(fc["file"])
    elif fc["scheme"] == "5fold":
        folds = train.make_5fold(cohorts, fc["seed"])
    elif fc["scheme"] == "4fold":
        folds = train.make_4fold(cohorts)
    else:
        raise ConfigError(f"unknown fold scheme {fc['scheme']!r}")
    train.validate_folds(folds, all_ids=list(cohorts), cohorts=cohorts)
    return folds


def _select_folds(folds, which):
    if which in ("all", None):
        return folds
    try:
        k = int(which)
    except (TypeError, ValueError):
        raise ConfigError(f"--fold must be an integer or 'all', got {which!r}") from None
    sel = [f for f in folds if f.fold_id == k]
    if not sel:
        raise ConfigError(f"no fold {k}; have {[f.fold_id for f in folds]}")
    return sel


def _train_overrides(args):
    ov = {}
    if args.seed is not None:
        ov["seed"] = args.seed
    if args.out is not None:
        ov["out"] = args.out
    if args.manifest is not None:
        ov["data"] = {"manifest": args.manifest}
    if args.fold is not None:
        ov["folds"] = {"fold": args.fold}
    return ov


def cmd_train(args):
    cfg = load_config(args.config, _train_overrides(args))
    if not cfg["data"]["manifest"]:
        raise ConfigError("no manifest given (data.manifest or --manifest)")
    manifest = data.Manifest.load(cfg["data"]["manifest"])
    model_cfg = build_model_config(cfg["model"], manifest.feature_dim)
    loss_cfg = _build(LossConfig, cfg["loss"], "loss")
    optim_cfg = _build(train.OptimConfig, cfg["optim"], "optim")
    folds = _select_folds(_resolve_folds(cfg, manifest), cfg["folds"]["fold"])
    needed = sorted({v for f in folds for v in f.train + f.valid + f.test})
    dataset = manifest.load_all(needed)

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg)
    fps = cfg["data"]["fps"]
    reports = {}

    def on_fold(f, res, test_report):
        fdir = out / f"fold{f.fold_id}"
        fdir.mkdir(exist_ok=True)
        save_checkpoint(res.best, fdir / "best.ckpt")
        save_checkpoint(res.last, fdir / "last.ckpt")
        train.write_history(res.history, fdir / "history.jsonl")
        val = res.best_report.to_dict()
        val.update(iteration=res.best.iteration, split="valid", fold=f.fold_id)
        _write_json(fdir / "valid_report.json", val)
        doc = test_report.to_dict()
        doc.update(split="test", fold=f.fold_id)
        _write_json(fdir / "test_report.json", doc)
        reports[f.fold_id] = test_report
        print(f"fold {f.fold_id}: valid wF1 {res.best.val_wf1:.4f} @ {res.best.iteration}, "
              f"test wF1 {test_report.wf1:.4f}, WMAPE {test_report.wmape:.2f}")

    cv = train.run_cv(folds, dataset, model_cfg, loss_cfg, optim_cfg, cfg["seed"], fps, on_fold=on_fold)
    summary = cv.aggregate()
    summary["params"] = model.count_params(model_cfg)
    summary["gflops"] = model.estimate_flops(model_cfg, model.GFLOPS_REFERENCE_T) / 1e9
    _write_json(out / "cv_report.json", summary)
    print(f"mean test wF1 {summary['wF1']:.4f}  wJacc {summary['wJacc']:.4f}  WMAPE {summary['WMAPE']:.2f}")
    return EXIT_OK


def cmd_eval(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    if not args.manifest:
        raise ConfigError("--manifest is required")
    ckpt = load_checkpoint(args.checkpoint)
    params = train.params_from_checkpoint(ckpt)
    manifest = data.Manifest.load(args.manifest)
    cfg = params.config
    if manifest.feature_dim != cfg.input_dim:
        raise ConfigError(f"checkpoint expects D={cfg.input_dim}, manifest has D={manifest.feature_dim}")
    if cfg.num_classes != data.NUM_CLASSES:
        raise ConfigError(f"checkpoint predicts {cfg.num_classes} classes, data has {data.NUM_CLASSES}")
    fold_id = args.fold if args.fold is not None else ckpt.meta.get("fold", 0)
    own = ckpt.meta.get("split")
    if args.folds:
        (fold,) = _select_folds(train.load_folds(args.folds), fold_id)
        ids = getattr(fold, args.split)
    elif own is not None and int(fold_id) == own["fold_id"]:
        # the split the checkpoint was trained on
        ids = own[args.split]
    else:
        ids = [v.video_id for v in manifest.videos if v.annotations]
    seqs = list(manifest.load_all(ids).values())
    fps = args.fps
    report = train.evaluate_model(params, seqs, fps)
    doc = report.to_dict()
    lengths = [data.resample_to_fps(s, fps).num_frames for s in seqs]
    doc.update(
        params=model.count_params(cfg),
        gflops_reference=model.estimate_flops(cfg, model.GFLOPS_REFERENCE_T) / 1e9,
        gflops_mean_length=model.estimate_flops(cfg, int(round(np.mean(lengths)))) / 1e9,
        checkpoint_iteration=ckpt.iteration,
    )
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(f"wF1 {report.wf1:.4f}  wJacc {report.wjacc:.4f}  WMAPE {report.wmape:.2f}  "
          f"({len(seqs)} videos)")
    return EXIT_OK


def cmd_predict(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    if not args.features:
        raise ConfigError("no feature files given")
    params = train.params_from_checkpoint(load_checkpoint(args.checkpoint))
    out = Path(args.out or "predictions")
    out.mkdir(parents=True, exist_ok=True)
    for path in args.features:
        seq = data.load_features(path)
        if seq.feature_dim != params.config.input_dim:
            raise ConfigError(f"{path}: D={seq.feature_dim}, checkpoint expects {params.config.input_dim}")
        probs = train.predict(params, seq)
        labels = np.argmax(probs, axis=1)
        lines = ["frame,label"] + [f"{t},{data.LabelClass(int(c)).canonical}" for t, c in enumerate(labels)]
        (out / f"{seq.video_id}.labels.csv").write_text("\n".join(lines) + "\n")
        if args.probs:
            np.savetxt(out / f"{seq.video_id}.probs.csv", probs, fmt="%.17g", delimiter=",")
        print(f"{seq.video_id}: {len(labels)} frames")
    return EXIT_OK


def cmd_profile(args):
    cfg = load_config(args.config)
    input_dim = cfg["model"]["input_dim"] or args.input_dim
    model_cfg = build_model_config(cfg["model"], input_dim)
    lengths = args.T or [model.GFLOPS_REFERENCE_T]
    doc = {
        "params": model.count_params(model_cfg),
        "receptive_field": model.receptive_field(model_cfg.base),
        "gflops": {str(T): model.estimate_flops(model_cfg, T) / 1e9 for T in lengths},
    }
    print(f"params            {doc['params']:,}")
    print(f"receptive field   {doc['receptive_field']:,} frames")
    for T, g in doc["gflops"].items():
        print(f"GFLOPs @ T={T:<6} {g:.4f}")
    if args.out:
        _write_json(args.out, doc)
    return EXIT_OK


def read_label_file(path):
    """Per-frame labels from an annotation CSV or a ``frame,label`` prediction file."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise data.DataError(f"{path}: {e.strerror or e}") from None
    head = text.split("\n", 1)[0].strip()
    if head == ",".join(data.ANNOTATION_HEADER):
        segs = data.parse_annotations(text)
        T = max(s.end_frame for s in segs) + 1 if segs else 0
        return data.rasterize(segs, T)
    if head != "frame,label":
        raise data.DataError(f"{path}: unrecognised label file header {head!r}")
    labels = []
    for i, line in enumerate(text.splitlines()[1:], start=2):
        if not line.strip():
            continue
        try:
            frame, name = line.split(",")
            if int(frame) != len(labels):
                raise ValueError("frames out of order")
            labels.append(int(data.LabelClass.from_name(name)))
        except ValueError as e:
            raise data.DataError(f"{path}: line {i}: {e}") from None
    return np.array(labels, dtype=np.int64)


def cmd_render(args):
    if not args.labels:
        raise ConfigError("give a ground-truth label file and zero or more prediction files")
    tracks = []
    for i, path in enumerate(args.labels):
        name = "ground truth" if i == 0 else Path(path).name.split(".")[0]
        tracks.append((name, read_label_file(path)))
    T = len(tracks[0][1])
    for name, lab in tracks[1:]:
        if len(lab) != T:
            raise data.DataError(f"track {name!r} has {len(lab)} frames, ground truth has {T}")
    svg = render_svg(tracks)
    out = Path(args.out or "timeline.svg")
    out.write_text(svg)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_folds_validate(args):
    path = args.folds or args.config
    if not path:
        raise ConfigError("give a fold document")
    folds = train.load_folds(path)
    all_ids = cohorts = None
    if args.manifest:
        manifest = data.Manifest.load(args.manifest)
        cohorts = {v.video_id: v.cohort for v in manifest.videos}
        all_ids = list(cohorts)
    train.validate_folds(folds, all_ids=all_ids, cohorts=cohorts)
    for f in folds:
        print(f"fold {f.fold_id}: train {len(f.train)}, valid {len(f.valid)}, test {len(f.test)}")
    print("ok")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="colontcn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *flags):
        if "config" in flags:
            sp.add_argument("--config", help="JSON config file")
        if "seed" in flags:
            sp.add_argument("--seed", type=int)
        if "out" in flags:
            sp.add_argument("--out")
        if "manifest" in flags:
            sp.add_argument("--manifest")
        if "fold" in flags:
            sp.add_argument("--fold", help="fold id or 'all'")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp, "config", "seed", "out")
    sp.add_argument("--n", type=int, default=60)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train one fold or the whole cross-validation")
    common(sp, "config", "seed", "out", "manifest", "fold")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp, "out", "manifest", "fold")
    sp.add_argument("--checkpoint")
    sp.add_argument("--folds", help="fold document (default: the split stored in the checkpoint)")
    sp.add_argument("--split", choices=("train", "valid", "test"), default="test")
    sp.add_argument("--fps", type=float, default=data.TARGET_FPS)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="per-frame labels for feature files")
    common(sp, "out")
    sp.add_argument("--checkpoint")
    sp.add_argument("--probs", action="store_true", help="also write class probabilities")
    sp.add_argument("features", nargs="*")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("profile", help="parameters, GFLOPs and receptive field of a model config")
    common(sp, "config", "out")
    sp.add_argument("--input-dim", type=int, default=2048)
    sp.add_argument("--T", type=int, nargs="*")
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("render", help="SVG timeline of ground truth and predictions")
    common(sp, "out")
    sp.add_argument("labels", nargs="*")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("folds-validate", help="check a fold document")
    common(sp, "config", "manifest")
    sp.add_argument("folds", nargs="?")
    sp.set_defaults(func=cmd_folds_validate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, train.FoldError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except data.DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
