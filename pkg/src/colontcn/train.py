"""AdamW training loop, model selection and the k-fold cross-validation harness.

Randomness is keyed by position, not by call order: the epoch permutation uses
stream ``(seed, fold, 1, epoch)``, dropout of iteration ``i`` uses
``(seed, fold, 2, i)`` and augmentation ``(seed, fold, 3, i, j)``. Resuming
therefore needs only the parameters, the optimizer moments and the iteration.
"""

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from colontcn import loss as losses
from colontcn import metrics, model, seqcore
from colontcn.checkpoint import Checkpoint
from colontcn.data import NUM_CLASSES, DataError, make_batch, resample_to_fps, temporal_augment
from colontcn.seqcore import NumericError, make_rng

logger = logging.getLogger(__name__)


class TrainingDiverged(NumericError):
    pass


@dataclass
class OptimConfig:
    lr0: float = 5e-4
    lr_final: float = 1e-6
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_iters: int = 3000
    batch_size: int = 6
    burn_in_iters: int = 500
    eval_every: int = 250
    augment: bool = True

    def __post_init__(self):
        if self.total_iters < 1:
            raise ValueError(f"total_iters must be >= 1, got {self.total_iters}")
        if not 0 < self.lr_final <= self.lr0:
            raise ValueError("need 0 < lr_final <= lr0")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1")
        if not 0 <= self.burn_in_iters <= self.total_iters:
            raise ValueError("burn_in_iters must lie in [0, total_iters]")
        if self.weight_decay < 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("invalid weight decay or betas")

    @classmethod
    def paper(cls, scheme="5fold"):
        """Full-scale schedule: 30k iterations for 5-fold CV, 22k for 4-fold."""
        return cls(total_iters=30000 if scheme == "5fold" else 22000, burn_in_iters=5000)


def lr_at(it, cfg):
    """Linear decay from ``lr0`` at 0 to ``lr_final`` at ``total_iters``."""
    if not 0 <= it <= cfg.total_iters:
        raise ValueError(f"iteration {it} outside [0, {cfg.total_iters}]")
    frac = it / cfg.total_iters
    return cfg.lr0 + (cfg.lr_final - cfg.lr0) * frac


def decays(name):
    """Weight decay applies to conv directions and gains, never to biases."""
    return not name.endswith(".b")


@dataclass
class OptimState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, tensors):
        return cls({k: np.zeros_like(a) for k, a in tensors.items()},
                   {k: np.zeros_like(a) for k, a in tensors.items()}, 0)

    def copy(self):
        return OptimState({k: a.copy() for k, a in self.m.items()},
                          {k: a.copy() for k, a in self.v.items()}, self.t)

    def to_tensors(self):
        out = {f"m.{k}": a for k, a in self.m.items()}
        out.update({f"v.{k}": a for k, a in self.v.items()})
        out["t"] = np.array([self.t], dtype=np.int64)
        return out

    @classmethod
    def from_tensors(cls, d):
        m = {k[2:]: a.copy() for k, a in d.items() if k.startswith("m.")}
        v = {k[2:]: a.copy() for k, a in d.items() if k.startswith("v.")}
        return cls(m, v, int(d["t"][0]))


def adamw_step(params, grads, state, lr, cfg):
    """One in-place AdamW update of the ``params`` dict (decoupled decay)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, theta in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        if m.shape != theta.shape or g.shape != theta.shape:
            raise ValueError(f"{name}: optimizer buffer shape mismatch")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay and decays(name):
            update = update + cfg.weight_decay * theta
        theta -= lr * update
    return params, state


# --------------------------------------------------------------------------
# losses over sequences and batches


def class_frame_counts(seqs, num_classes=NUM_CLASSES):
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in seqs:
        counts += np.bincount(s.labels[s.mask], minlength=num_classes)[:num_classes]
    return counts


def sequence_loss(params, x, labels, mask, weights, loss_cfg, rng=None, training=False, grad=True):
    """Combined loss of one unpadded sequence; accumulates parameter gradients when ``grad``."""
    out, tape = model.forward(params, x, rng, training)
    if not grad:
        return losses.combined_loss(out, labels, weights, loss_cfg, mask)
    value, g_lp = losses.combined_loss(out, labels, weights, loss_cfg, mask, return_grad=True)
    g_logits = [seqcore.log_softmax_backward(p, g) for p, g in zip(out.probs, g_lp)]
    model.backward(params, tape, g_logits)
    return value


def batch_loss(params, batch, weights, loss_cfg, rng=None, training=False, grad=True):
    """Mean per-video loss over a padded batch; gradients are averaged likewise.

    Each entry is cut to its true length first, so padded frames never enter
    the computation.
    """
    if grad:
        params.zero_grad()
    total = 0.0
    for i in range(len(batch)):
        x, y, m = batch.sequence(i)
        total += sequence_loss(params, x, y, m, weights, loss_cfg, rng, training, grad)
    n = len(batch)
    if grad:
        for g in params.grads.values():
            g /= n
    return total / n


# --------------------------------------------------------------------------
# evaluation


def predict(params, seq):
    """Inference-mode class probabilities of the last stage, shape (T, C)."""
    out, _ = model.forward(params, seq.features, None, False)
    return out.probs[-1]


def evaluate_model(params, seqs, fps=None):
    """MetricsReport of ``params`` on labelled sequences (resampled to ``fps`` when given)."""
    if not seqs:
        raise DataError("no sequences to evaluate")
    rows, ids = [], []
    for s in seqs:
        if fps is not None:
            s = resample_to_fps(s, fps)
        pred = np.argmax(predict(params, s), axis=1)
        rows.append((s.labels, pred, s.mask))
        ids.append(s.video_id)
    return metrics.evaluate(rows, params.config.num_classes, ids)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    best: Optional[Checkpoint]  # None only when a resumed run never beat the earlier best
    last: Checkpoint
    history: List[dict]
    best_report: Optional[metrics.MetricsReport] = None


def batch_ids(it, n, batch_size, seed, fold=0):
    """Training-set positions of iteration ``it``: consecutive slices of per-epoch permutations."""
    out = []
    for j in range(batch_size):
        k = it * batch_size + j
        epoch, pos = divmod(k, n)
        out.append(int(make_rng(seed, fold, 1, epoch).permutation(n)[pos]))
    return out


def make_checkpoint(params, state, it, val_wf1, seed, meta):
    return Checkpoint(
        params.config.to_dict(),
        {k: t.copy() for k, t in params.tensors.items()},
        it, val_wf1, seed,
        None if state is None else {k: a.copy() for k, a in state.to_tensors().items()},
        dict(meta),
    )


def params_from_checkpoint(ckpt):
    cfg = model.ModelConfig.from_dict(ckpt.model_config)
    return model.ModelParams(cfg, ckpt.params)


def train_loop(train_seqs, valid_seqs, model_cfg, loss_cfg=None, optim_cfg=None, seed=0, fold=0,
               resume=None, fps=5.0, log_every=0, extra_meta=None, stop_at=None):
    """Train one model; returns the best checkpoint (by validation wF1 after burn-in).

    ``resume`` is a checkpoint written by a previous call with the same data
    and configs; the run continues from its iteration. ``stop_at`` ends the
    run early (the schedule still spans ``total_iters``), leaving ``last`` as
    a resumable checkpoint.
    """
    loss_cfg = loss_cfg or losses.LossConfig()
    optim_cfg = optim_cfg or OptimConfig()
    if not train_seqs or not valid_seqs:
        raise DataError("train and validation splits must be non-empty")
    if any(s.labels is None for s in list(train_seqs) + list(valid_seqs)):
        raise DataError("training needs labelled sequences")
    weights = losses.median_frequency_weights(class_frame_counts(train_seqs, model_cfg.num_classes))
    meta = {
        "loss": asdict(loss_cfg),
        "optim": asdict(optim_cfg),
        "class_weights": weights.tolist(),
        "fold": fold,
        **(extra_meta or {}),
    }

    if resume is None:
        params = model.init_params(model_cfg, make_rng(seed, fold, 0))
        state = OptimState.zeros_like(params.tensors)
        start = 0
        best = None
    else:
        params = params_from_checkpoint(resume)
        if params.config != model_cfg:
            raise ValueError("resume checkpoint was trained with a different model config")
        state = OptimState.from_tensors(resume.optim_state)
        start = resume.iteration
        best = resume.meta.get("best")
    # a resumed run only knows the earlier best's score; its weights stay in the caller's files
    best_ckpt, best_report = None, None

    history = []
    n = len(train_seqs)
    end = optim_cfg.total_iters if stop_at is None else min(stop_at, optim_cfg.total_iters)
    for it in range(start, end):
        lr = lr_at(it, optim_cfg)
        seqs = []
        for j, idx in enumerate(batch_ids(it, n, optim_cfg.batch_size, seed, fold)):
            s = train_seqs[idx]
            if optim_cfg.augment:
                s = temporal_augment(s, make_rng(seed, fold, 3, it, j), fps)
            else:
                s = resample_to_fps(s, fps)
            seqs.append(s)
        batch = make_batch(seqs)
        value = batch_loss(params, batch, weights, loss_cfg, make_rng(seed, fold, 2, it), True)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at iteration {it + 1} (lr {lr:.3g})")
        try:
            adamw_step(params.tensors, params.grads, state, lr, optim_cfg)
        except NumericError as e:
            raise TrainingDiverged(f"iteration {it + 1}: {e}") from None
        done = it + 1
        history.append({"iter": done, "lr": lr, "loss": value})
        if log_every and done % log_every == 0:
            logger.info("iter %d lr %.3g loss %.5f", done, lr, value)

        if done % optim_cfg.eval_every == 0 or done == optim_cfg.total_iters:
            report = evaluate_model(params, valid_seqs, fps)
            history.append({"iter": done, "wF1": report.wf1, "wJacc": report.wjacc, "WMAPE": report.wmape})
            logger.info("iter %d validation wF1 %.4f", done, report.wf1)
            if done >= optim_cfg.burn_in_iters and (best is None or report.wf1 > best["wF1"]):
                best = {"iter": done, "wF1": report.wf1}
                best_ckpt = make_checkpoint(params, state, done, report.wf1, seed, meta)
                best_report = report

    last_meta = dict(meta, best=best)
    last = make_checkpoint(params, state, max(end, start), None, seed, last_meta)
    if best is None and end == optim_cfg.total_iters:
        raise RuntimeError("no evaluation after burn-in; check eval_every/burn_in_iters")
    return TrainResult(best_ckpt, last, history, best_report)


def write_history(history, path):
    with open(path, "w") as f:
        for rec in history:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_history(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# --------------------------------------------------------------------------
# folds


class FoldError(ValueError):
    pass


@dataclass
class FoldSpec:
    fold_id: int
    train: List[str]
    valid: List[str]
    test: List[str]
    scheme: str = "5fold"

    def __post_init__(self):
        if self.scheme not in ("5fold", "4fold"):
            raise FoldError(f"unknown scheme {self.scheme!r}")

    def to_dict(self):
        return {"fold_id": self.fold_id, "train": list(self.train), "valid": list(self.valid),
                "test": list(self.test)}


def make_5fold(cohorts, seed=0, n_folds=5):
    """Cohort-stratified folds: every cohort contributes its share of each split.

    ``cohorts`` maps video id -> cohort. Cohorts are shuffled separately,
    concatenated and dealt round-robin onto test folds. Fold ``k`` validates
    on one video per cohort taken from the next fold's test share.
    """
    by_cohort = _group(cohorts)
    order = []
    for c, ids in by_cohort.items():
        order += [(c, ids[i]) for i in make_rng(seed, 4, c).permutation(len(ids))]
    test_fold = {vid: i % n_folds for i, (_, vid) in enumerate(order)}
    folds = []
    for k in range(n_folds):
        test = [v for _, v in order if test_fold[v] == k]
        valid = []
        for c in by_cohort:
            for d in range(1, n_folds):
                pick = [v for cc, v in order if cc == c and test_fold[v] == (k + d) % n_folds]
                if pick:
                    valid.append(pick[0])
                    break
        train_ids = [v for _, v in order if v not in test and v not in valid]
        folds.append(FoldSpec(k, sorted(train_ids), sorted(valid), sorted(test), "5fold"))
    return folds


def make_4fold(cohorts):
    """Leave-cohorts-out folds: test cohort k, validate on the next cohort, train on the rest."""
    by_cohort = _group(cohorts)
    names = sorted(by_cohort)
    if len(names) < 3:
        raise FoldError("cohort folds need at least 3 cohorts")
    folds = []
    for k, c in enumerate(names):
        vc = names[(k + 1) % len(names)]
        train = sorted(v for cc in names if cc not in (c, vc) for v in by_cohort[cc])
        folds.append(FoldSpec(k, train, sorted(by_cohort[vc]), sorted(by_cohort[c]), "4fold"))
    return folds


def _group(cohorts):
    if any(c is None for c in cohorts.values()):
        raise FoldError("every video needs a cohort")
    out = {}
    for vid in sorted(cohorts):
        out.setdefault(cohorts[vid], []).append(vid)
    return dict(sorted(out.items()))


def validate_folds(folds, all_ids=None, cohorts=None):
    """Raise FoldError unless the folds are a valid scheme.

    Checks per fold: non-empty splits without duplicates, pairwise disjoint.
    Across folds: one scheme, distinct ids, and each video tested exactly once
    (against ``all_ids`` when given). With ``cohorts``, 4-fold splits must not
    cut through a cohort.
    """
    if not folds:
        raise FoldError("no folds")
    schemes = {f.scheme for f in folds}
    if len(schemes) != 1:
        raise FoldError(f"mixed schemes {sorted(schemes)}")
    if len({f.fold_id for f in folds}) != len(folds):
        raise FoldError("duplicate fold ids")
    tested = {}
    for f in folds:
        splits = {"train": f.train, "valid": f.valid, "test": f.test}
        for name, ids in splits.items():
            if not ids:
                raise FoldError(f"fold {f.fold_id}: empty {name} split")
            if len(set(ids)) != len(ids):
                raise FoldError(f"fold {f.fold_id}: duplicate ids in {name}")
        for a, b in (("train", "valid"), ("train", "test"), ("valid", "test")):
            common = set(splits[a]) & set(splits[b])
            if common:
                raise FoldError(f"fold {f.fold_id}: {a}/{b} overlap on {sorted(common)[:5]}")
        for v in f.test:
            if v in tested:
                raise FoldError(f"video {v} tested in folds {tested[v]} and {f.fold_id}")
            tested[v] = f.fold_id
        if all_ids is not None:
            unknown = (set(f.train) | set(f.valid) | set(f.test)) - set(all_ids)
            if unknown:
                raise FoldError(f"fold {f.fold_id}: unknown videos {sorted(unknown)[:5]}")
        if cohorts is not None and f.scheme == "4fold":
            seen = {}
            for name, ids in splits.items():
                for v in ids:
                    c = cohorts.get(v)
                    if seen.setdefault(c, name) != name:
                        raise FoldError(f"fold {f.fold_id}: cohort {c} split across {seen[c]} and {name}")
    if all_ids is not None and set(tested) != set(all_ids):
        missing = sorted(set(all_ids) - set(tested))
        raise FoldError(f"videos never tested: {missing[:5]}")


def save_folds(folds, path):
    doc = {"format": "colontcn-folds", "scheme": folds[0].scheme if folds else None,
           "folds": [f.to_dict() for f in folds]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_folds(path):
    try:
        doc = json.loads(Path(path).read_text())
        return [FoldSpec(d["fold_id"], d["train"], d["valid"], d["test"], doc["scheme"])
                for d in doc["folds"]]
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as e:
        raise FoldError(f"{path}: malformed fold document ({e})") from None


# --------------------------------------------------------------------------
# cross-validation


@dataclass
class CVResult:
    reports: List[metrics.MetricsReport]
    results: List[TrainResult]
    folds: List[FoldSpec]

    def aggregate(self):
        """Mean and standard deviation over folds, in the per-class F1 / wF1 / wJacc / WMAPE layout."""
        f1 = np.array([r.f1 for r in self.reports])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # all-nan columns
            f1_mean = np.nanmean(f1, axis=0)
        out = {"folds": len(self.reports)}
        out["f1"] = {n: (None if np.isnan(x) else float(x)) for n, x in zip(metrics.CLASS_NAMES, f1_mean)}
        for key, attr in (("wF1", "wf1"), ("wJacc", "wjacc"), ("WMAPE", "wmape")):
            vals = np.array([getattr(r, attr) for r in self.reports])
            out[key] = float(vals.mean())
            out[key + "_std"] = float(vals.std())
        return out


def run_cv(folds, dataset, model_cfg, loss_cfg=None, optim_cfg=None, seed=0, fps=5.0,
           all_ids=None, on_fold=None):
    """Train and test every fold; ``dataset`` maps video id -> FeatureSequence."""
    validate_folds(folds, all_ids=all_ids)
    missing = {v for f in folds for v in f.train + f.valid + f.test} - set(dataset)
    if missing:
        raise DataError(f"fold videos missing from dataset: {sorted(missing)[:5]}")
    reports, results = [], []
    for f in folds:
        res = train_loop([dataset[v] for v in f.train], [dataset[v] for v in f.valid],
                         model_cfg, loss_cfg, optim_cfg, seed, f.fold_id, fps=fps,
                         extra_meta={"split": f.to_dict(), "scheme": f.scheme})
        params = params_from_checkpoint(res.best)
        report = evaluate_model(params, [dataset[v] for v in f.test], fps)
        reports.append(report)
        results.append(res)
        logger.info("fold %d test wF1 %.4f WMAPE %.2f", f.fold_id, report.wf1, report.wmape)
        if on_fold is not None:
            on_fold(f, res, report)
    return CVResult(reports, results, folds)
