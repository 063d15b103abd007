"""Training loop, evaluation, the H x V grid, the fusion microbenchmark,
and results persistence.

Determinism contract: given (config, seed), the loss trajectory, final
metrics, and checkpointed parameters are reproducible bit-for-bit. Wall-clock
durations are therefore reported in memory and in the grid CSV but kept out
of the canonical train results file.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data, fusion, layers, metrics, models
from .errors import (
    DatasetError,
    DivergedLoss,
    InvalidConfig,
    PairfuseError,
    SchemaVersionMismatch,
)

RESULTS_SCHEMA_VERSION = 1

# fids the cross-analysis grid runs by default; the worst-performing
# horizontal (4, 10) and vertical (3, 4) functions are excluded
DEFAULT_GRID_H_FIDS = (1, 2, 3, 5, 6, 7, 8, 9, 11, 12, 13)
DEFAULT_GRID_V_FIDS = (1, 2, 5, 6, 7, 8, 9, 10, 11, 12, 13)


# ---------------------------------------------------------------------------
# configs and results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    monitor: str = "val_loss"
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-6
    val_fraction: float = 0.1
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    dtype: str = "float32"
    augment: bool = False
    augment_params: data.AugmentParams = field(default_factory=data.AugmentParams)

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or not self.seeds:
            raise InvalidConfig("epochs, batch_size and seeds must be >= 1")
        if self.lr < 0:
            # lr == 0 is allowed: a deliberate no-update run
            raise InvalidConfig("lr must be >= 0")
        if not 0.0 < self.plateau_factor < 1.0:
            raise InvalidConfig("plateau factor must lie in (0, 1)")
        if self.plateau_patience < 0:
            raise InvalidConfig("plateau patience must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise InvalidConfig("val_fraction must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfig(f"dtype must be float32|float64, got {self.dtype}")


@dataclass
class RunResult:
    seed: int
    train_loss: list[float]
    train_acc: list[float]
    val_loss: list[float]
    final_train_acc: float
    test_accuracy: float
    test_macro_f1: float
    per_class_f1: list[float]
    parameter_count: int
    wall_time_s: float


@dataclass
class CellResult:
    h_fid: int
    v_fid: int
    status: str                    # "ok" | "failed"
    error: str = ""
    mean_train_acc: float = 0.0
    mean_test_acc: float = 0.0
    mean_test_f1: float = 0.0
    runs: list[RunResult] = field(default_factory=list)


@dataclass
class GridResult:
    h_fids: list[int]
    v_fids: list[int]
    cells: dict[str, CellResult]   # key "h,v"


@dataclass
class BenchReport:
    shape: tuple[int, int, int, int]
    n_inputs: int
    warmup: int
    baseline_s: list[float]
    per_fid_s: dict[int, list[float]]
    summary: dict[str, dict[str, float]]


# ---------------------------------------------------------------------------
# reduce-on-plateau scheduler
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlateauState:
    lr: float
    factor: float = 0.1
    patience: int = 5
    threshold: float = 1e-4
    min_lr: float = 1e-6
    best: float | None = None
    bad_count: int = 0


def lr_plateau_step(state: PlateauState, monitored_value: float) -> PlateauState:
    """Advance the scheduler with one monitored value (lower is better).

    The lr is multiplied by `factor` after `patience` consecutive values that
    fail to improve on the best seen by a relative `threshold`, then the
    counter resets. The lr never drops below `min_lr`.
    """
    if state.best is None:
        return replace(state, best=monitored_value, bad_count=0)
    improved = monitored_value < state.best * (1.0 - state.threshold)
    best = min(state.best, monitored_value)
    if improved:
        return replace(state, best=best, bad_count=0)
    bad = state.bad_count + 1
    if bad >= state.patience:
        return replace(state, best=best, bad_count=0,
                       lr=max(state.lr * state.factor, state.min_lr))
    return replace(state, best=best, bad_count=bad)


# ---------------------------------------------------------------------------
# Adam optimizer
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.beta1, self.beta2, self.eps = cfg.beta1, cfg.beta2, cfg.adam_eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p -= lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

def _normalized(pairs, stats, dtype):
    out = []
    for p in pairs:
        q = data.normalize(p, stats)
        out.append(data.SamplePair(q.pre.astype(dtype), q.post.astype(dtype),
                                   q.label))
    return out


def _epoch_pass(model, pairs, weights, cfg, update, adam=None, lr=None,
                shuffle_seed=None, epoch=0):
    """One pass over `pairs`; returns (mean loss, accuracy)."""
    total_loss = 0.0
    hits = 0
    n = len(pairs)
    for xa, xb, labels in data.batch_iter(pairs, cfg.batch_size,
                                          shuffle_seed=shuffle_seed, epoch=epoch):
        targets = metrics.one_hot(labels, model.config.num_classes)
        if update:
            logits, graph, out_id = models.forward_with_graph(model, xa, xb)
        else:
            logits = models.forward(model, xa, xb)
        if not np.isfinite(logits).all():
            raise DivergedLoss(f"non-finite logits at epoch {epoch}")
        batch = metrics.LossBatch(targets=targets,
                                  predictions=logits.astype(np.float64),
                                  labels=labels)
        loss = metrics.weighted_mse(batch, weights)
        if not np.isfinite(loss):
            raise DivergedLoss(f"non-finite loss at epoch {epoch}")
        total_loss += loss * len(labels)
        hits += int(np.sum(metrics.predict_labels(logits) == labels))
        if update:
            dlogits = metrics.weighted_mse_grad(batch, weights).astype(logits.dtype)
            grads = graph.backward(out_id, dlogits)
            adam.step(model.params, grads, lr)
    return total_loss / n, hits / n


def train(cfg: TrainConfig, model_cfg: models.ModelConfig, dataset: data.Dataset,
          seed: int | None = None, checkpoint_path=None):
    """Train one seed; returns (RunResult, best Model).

    The model is re-initialized from (model_cfg, seed); a 10% validation
    carve-out of the training split (seeded) drives the plateau scheduler and
    best-checkpoint selection, leaving the test split untouched.
    """
    cfg.validate()
    if seed is None:
        seed = cfg.seeds[0]
    if not dataset.train:
        raise DatasetError("training split is empty")
    if dataset.stats is None:
        raise DatasetError("dataset has no normalization stats")
    t_start = time.perf_counter()
    dtype = np.dtype(cfg.dtype)

    model = models.init_parameters(model_cfg, seed)
    model.params = {k: v.astype(dtype) for k, v in model.params.items()}
    weights = metrics.class_weights(np.maximum(dataset.counts, 1))

    # seeded validation carve-out
    n_train = len(dataset.train)
    n_val = int(round(cfg.val_fraction * n_train))
    val_order = np.random.default_rng((seed, 7919)).permutation(n_train)
    val_idx = set(val_order[:n_val].tolist())
    train_raw = [p for i, p in enumerate(dataset.train) if i not in val_idx]
    val_raw = [dataset.train[i] for i in sorted(val_idx)]
    if not train_raw:
        train_raw, val_raw = val_raw, []

    val_pairs = _normalized(val_raw, dataset.stats, dtype)
    plain_train = _normalized(train_raw, dataset.stats, dtype)

    adam = Adam(model.params, cfg)
    sched = PlateauState(lr=cfg.lr, factor=cfg.plateau_factor,
                         patience=cfg.plateau_patience,
                         threshold=cfg.plateau_threshold, min_lr=cfg.min_lr)

    train_losses, train_accs, val_losses = [], [], []
    best_monitor = np.inf
    best_params = {k: v.copy() for k, v in model.params.items()}

    for epoch in range(cfg.epochs):
        if cfg.augment:
            epoch_pairs = _normalized(
                [data.augment(p, cfg.augment_params, seed=(seed, epoch, i))
                 for i, p in enumerate(train_raw)],
                dataset.stats, dtype)
        else:
            epoch_pairs = plain_train
        loss, acc = _epoch_pass(model, epoch_pairs, weights, cfg, update=True,
                                adam=adam, lr=sched.lr, shuffle_seed=seed,
                                epoch=epoch)
        train_losses.append(loss)
        train_accs.append(acc)
        if val_pairs:
            vloss, _ = _epoch_pass(model, val_pairs, weights, cfg, update=False)
        else:
            vloss = loss
        val_losses.append(vloss)
        monitored = vloss if cfg.monitor == "val_loss" else loss
        if monitored < best_monitor:
            best_monitor = monitored
            best_params = {k: v.copy() for k, v in model.params.items()}
        sched = lr_plateau_step(sched, monitored)

    model.params = best_params
    if checkpoint_path is not None:
        models.save_checkpoint(model, checkpoint_path)

    test_pairs = _normalized(dataset.test, dataset.stats, dtype)
    if test_pairs:
        ev = evaluate(model, test_pairs, batch_size=cfg.batch_size)
        test_acc, test_f1, pcf1 = ev["accuracy"], ev["macro_f1"], ev["per_class_f1"]
    else:
        test_acc, test_f1, pcf1 = 0.0, 0.0, [0.0] * model.config.num_classes

    result = RunResult(
        seed=seed,
        train_loss=[float(x) for x in train_losses],
        train_acc=[float(x) for x in train_accs],
        val_loss=[float(x) for x in val_losses],
        final_train_acc=float(train_accs[-1]),
        test_accuracy=float(test_acc),
        test_macro_f1=float(test_f1),
        per_class_f1=[float(x) for x in pcf1],
        parameter_count=models.parameter_count(model),
        wall_time_s=time.perf_counter() - t_start,
    )
    return result, model


def evaluate(model: models.Model, pairs, batch_size: int = 64) -> dict:
    """Accuracy, macro-F1, per-class F1 and the confusion matrix; no updates."""
    if not pairs:
        raise DatasetError("cannot evaluate on an empty split")
    preds, labels = [], []
    for xa, xb, lab in data.batch_iter(pairs, batch_size):
        logits = models.forward(model, xa, xb)
        preds.append(metrics.predict_labels(logits))
        labels.append(lab)
    preds = np.concatenate(preds)
    labels = np.concatenate(labels)
    c = model.config.num_classes
    return {
        "accuracy": metrics.accuracy(preds, labels),
        "macro_f1": metrics.macro_f1(preds, labels, c),
        "per_class_f1": metrics.per_class_f1(preds, labels, c).tolist(),
        "confusion": metrics.confusion_matrix(preds, labels, c).tolist(),
    }


# ---------------------------------------------------------------------------
# H x V cross-analysis grid
# ---------------------------------------------------------------------------

def _cell_key(h_fid: int, v_fid: int) -> str:
    return f"{h_fid},{v_fid}"


def run_grid_cell(h_fid: int, v_fid: int, cfg: TrainConfig,
                  model_cfg: models.ModelConfig, dataset: data.Dataset,
                  train_fn=None) -> CellResult:
    """All seeds of one (h, v) cell; failures are recorded, not raised."""
    train_fn = train_fn or train
    base = dataclasses.replace(
        model_cfg, plan=models.FusePlan(mode="fuse_hv", h_fid=h_fid, v_fid=v_fid))
    try:
        runs = [train_fn(cfg, base, dataset, seed=s)[0] for s in cfg.seeds]
    except PairfuseError as exc:
        return CellResult(h_fid=h_fid, v_fid=v_fid, status="failed",
                          error=f"{type(exc).__name__}: {exc}")
    return CellResult(
        h_fid=h_fid, v_fid=v_fid, status="ok",
        mean_train_acc=float(np.mean([r.final_train_acc for r in runs])),
        mean_test_acc=float(np.mean([r.test_accuracy for r in runs])),
        mean_test_f1=float(np.mean([r.test_macro_f1 for r in runs])),
        runs=runs,
    )


def grid_cross_analysis(h_fids, v_fids, cfg: TrainConfig,
                        model_cfg: models.ModelConfig, dataset: data.Dataset,
                        out_dir=None, jobs: int = 1, train_fn=None) -> GridResult:
    """Mean-over-seeds cell per (h, v) pair; persists incrementally, resumes.

    With an out_dir, finished cells found in grid.json are kept as-is and only
    missing/failed cells are recomputed.
    """
    h_fids, v_fids = list(h_fids), list(v_fids)
    if not h_fids or not v_fids:
        raise InvalidConfig("fid lists must be non-empty")
    for fid in h_fids + v_fids:
        if fid not in fusion.ALL_FIDS:
            raise InvalidConfig(f"fuse function id {fid} outside 1..13")

    grid = GridResult(h_fids=h_fids, v_fids=v_fids, cells={})
    grid_path = Path(out_dir) / "grid.json" if out_dir is not None else None
    if grid_path is not None and grid_path.exists():
        prior = load_results(grid_path)
        for key, cell in prior.cells.items():
            if cell.status == "ok" and cell.h_fid in h_fids and cell.v_fid in v_fids:
                grid.cells[key] = cell

    todo = [(h, v) for h in h_fids for v in v_fids
            if _cell_key(h, v) not in grid.cells]

    def store(cell: CellResult) -> None:
        grid.cells[_cell_key(cell.h_fid, cell.v_fid)] = cell
        if grid_path is not None:
            grid_path.parent.mkdir(parents=True, exist_ok=True)
            persist_results(grid, grid_path)
            write_grid_csv(grid, grid_path.with_suffix(".csv"))

    if jobs > 1 and len(todo) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_grid_cell, h, v, cfg, model_cfg, dataset)
                       for h, v in todo]
            for fut in futures:
                store(fut.result())
    else:
        for h, v in todo:
            store(run_grid_cell(h, v, cfg, model_cfg, dataset, train_fn=train_fn))
    return grid


# ---------------------------------------------------------------------------
# fusion-overhead microbenchmark
# ---------------------------------------------------------------------------

def bench_fuse_overhead(shape=(1, 8, 32, 32), fids=fusion.ALL_FIDS,
                        n_inputs: int = 1000, warmup: int = 50,
                        seed: int = 0) -> BenchReport:
    """Time a small two-branch stage forward with and without a fusion tap.

    The same `n_inputs` input pairs (fresh per index) feed every variant; the
    first `warmup` samples are excluded from the summaries but kept in the
    series so warm-up effects stay visible.
    """
    if n_inputs < 1:
        raise InvalidConfig("n_inputs must be >= 1")
    if not 0 <= warmup < n_inputs:
        raise InvalidConfig("need 0 <= warmup < n_inputs")
    shape = tuple(shape)
    if len(shape) != 4 or shape[0] != 1:
        raise InvalidConfig(f"bench shape must be (1, C, H, W), got {shape}")
    rng = np.random.default_rng(seed)
    xa = rng.standard_normal((n_inputs,) + shape[1:])
    xb = rng.standard_normal((n_inputs,) + shape[1:])
    c = shape[1]
    spec = layers.StageSpec(c, c, kernel=3, stride=1, pool="none")
    stage = layers.init_stage(rng, spec)

    def run(fid):
        samples = []
        for i in range(n_inputs):
            a = xa[i:i + 1]
            b = xb[i:i + 1]
            t0 = time.perf_counter()
            fa = layers.stage_forward(stage, spec, a)
            fb = layers.stage_forward(stage, spec, b)
            if fid is not None:
                fused = fusion.fuse_forward(fid, fa, fb)
                sink = float(fused.ravel()[0])
            else:
                sink = float(fa.ravel()[0]) + float(fb.ravel()[0])
            samples.append(time.perf_counter() - t0)
            del sink
        return samples

    baseline = run(None)
    per_fid = {int(fid): run(fid) for fid in fids}

    def summarize(samples):
        tail = np.asarray(samples[warmup:])
        return {
            "median_s": float(np.median(tail)),
            "p95_s": float(np.percentile(tail, 95)),
            "mean_s": float(tail.mean()),
            "count": int(tail.size),
        }

    summary = {"baseline": summarize(baseline)}
    base_med = summary["baseline"]["median_s"]
    for fid, samples in per_fid.items():
        s = summarize(samples)
        s["overhead_ratio"] = s["median_s"] / base_med if base_med > 0 else float("inf")
        summary[f"fid_{fid}"] = s
    return BenchReport(shape=shape, n_inputs=n_inputs, warmup=warmup,
                       baseline_s=baseline, per_fid_s=per_fid, summary=summary)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, RunResult):
        return dataclasses.asdict(obj)
    if isinstance(obj, CellResult):
        d = dataclasses.asdict(obj)
        d["runs"] = [_jsonable(r) for r in obj.runs]
        return d
    raise TypeError(type(obj))


def persist_results(result, path) -> None:
    """Lossless JSON round-trip for RunResult / GridResult / BenchReport."""
    if isinstance(result, RunResult):
        kind, payload = "run", _jsonable(result)
    elif isinstance(result, GridResult):
        kind = "grid"
        payload = {
            "h_fids": result.h_fids,
            "v_fids": result.v_fids,
            "cells": {k: _jsonable(c) for k, c in result.cells.items()},
        }
    elif isinstance(result, BenchReport):
        kind = "bench"
        payload = {
            "shape": list(result.shape),
            "n_inputs": result.n_inputs,
            "warmup": result.warmup,
            "baseline_s": result.baseline_s,
            "per_fid_s": {str(k): v for k, v in result.per_fid_s.items()},
            "summary": result.summary,
        }
    else:
        raise TypeError(f"cannot persist {type(result).__name__}")
    doc = {"schema_version": RESULTS_SCHEMA_VERSION, "kind": kind, "payload": payload}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _run_from_dict(d: dict) -> RunResult:
    return RunResult(**d)


def load_results(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    version = doc.get("schema_version")
    if version != RESULTS_SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"results schema {version} != supported {RESULTS_SCHEMA_VERSION}")
    kind, payload = doc["kind"], doc["payload"]
    if kind == "run":
        return _run_from_dict(payload)
    if kind == "grid":
        cells = {}
        for key, c in payload["cells"].items():
            runs = [_run_from_dict(r) for r in c.pop("runs")]
            cells[key] = CellResult(runs=runs, **c)
        return GridResult(h_fids=payload["h_fids"], v_fids=payload["v_fids"],
                          cells=cells)
    if kind == "bench":
        return BenchReport(
            shape=tuple(payload["shape"]),
            n_inputs=payload["n_inputs"],
            warmup=payload["warmup"],
            baseline_s=payload["baseline_s"],
            per_fid_s={int(k): v for k, v in payload["per_fid_s"].items()},
            summary=payload["summary"],
        )
    raise SchemaVersionMismatch(f"unknown results kind {kind!r}")


def write_grid_csv(grid: GridResult, path) -> None:
    """One row per seed per cell, plus failed-cell marker rows."""
    lines = ["h_fid,v_fid,seed,train_acc,test_acc,test_f1,params,wall_s"]
    for h in grid.h_fids:
        for v in grid.v_fids:
            cell = grid.cells.get(_cell_key(h, v))
            if cell is None:
                continue
            if cell.status != "ok":
                lines.append(f"{h},{v},,,,,,{cell.status}")
                continue
            for r in cell.runs:
                lines.append(
                    f"{h},{v},{r.seed},{r.final_train_acc:.6f},"
                    f"{r.test_accuracy:.6f},{r.test_macro_f1:.6f},"
                    f"{r.parameter_count},{r.wall_time_s:.3f}"
                )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
