"""Command-line driver.

Subcommands: prepare, synth, train, eval, grid, bench, report.
Common flags: --config, --out, --seed, --jobs, --size. The PAIRFUSE_OUT
environment variable supplies the default output root. Exit codes: 0 success,
1 runtime failure, 2 usage or validation failure.

The config file is declarative JSON with "model", "train" and "synth"
sections; --set section.key=value overrides individual entries and dedicated
flags take precedence over both.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import data, experiment, models, report
from .errors import (
    InvalidConfig,
    PairfuseError,
    ParseError,
    ValidationError,
)

USAGE_EXIT = 2
RUNTIME_EXIT = 1


def _default_out(subcommand: str) -> str | None:
    root = os.environ.get("PAIRFUSE_OUT")
    return str(Path(root) / subcommand) if root else None


def _load_config(path: str | None, overrides: list[str]) -> dict:
    cfg: dict = {"model": {}, "train": {}, "synth": {}}
    if path:
        with open(path, encoding="utf-8") as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise InvalidConfig(f"config root must be an object: {path}")
        for key, val in loaded.items():
            if key not in cfg or not isinstance(val, dict):
                raise InvalidConfig(f"unknown config section {key!r}")
            cfg[key].update(val)
    for item in overrides or []:
        if "=" not in item:
            raise InvalidConfig(f"--set needs section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        if "." not in dotted:
            raise InvalidConfig(f"--set needs section.key=value, got {item!r}")
        section, key = dotted.split(".", 1)
        if section not in cfg:
            raise InvalidConfig(f"unknown config section {section!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cfg[section][key] = value
    return cfg


def _model_config(section: dict, size: int | None) -> models.ModelConfig:
    section = dict(section)
    mode = section.pop("mode", "fuse_hv")
    h_fid = section.pop("h_fid", 11)
    v_fid = section.pop("v_fid", 8)
    if mode in ("fuse_h", "retrofit_single", "retrofit_double"):
        plan = models.FusePlan(mode=mode, h_fid=h_fid)
    elif mode == "fuse_v":
        plan = models.FusePlan(mode=mode, v_fid=v_fid)
    elif mode == "fuse_hv":
        plan = models.FusePlan(mode=mode, h_fid=h_fid, v_fid=v_fid)
    elif mode == "concat_baseline":
        plan = models.FusePlan(mode=mode)
    else:
        raise InvalidConfig(f"unknown model mode {mode!r}")
    for key in ("stage_widths", "post_widths", "mlp_widths"):
        if key in section:
            section[key] = tuple(section[key])
    if size is not None:
        section["input_size"] = size
    try:
        cfg = models.ModelConfig(plan=plan, **section)
    except TypeError as exc:
        raise InvalidConfig(f"bad model config: {exc}") from exc
    cfg.validate()
    return cfg


def _train_config(section: dict, seed: int | None) -> experiment.TrainConfig:
    section = dict(section)
    if "seeds" in section:
        section["seeds"] = tuple(section["seeds"])
    if "augment_params" in section:
        section["augment_params"] = data.AugmentParams(**section["augment_params"])
    try:
        cfg = experiment.TrainConfig(**section)
    except TypeError as exc:
        raise InvalidConfig(f"bad train config: {exc}") from exc
    if seed is not None:
        cfg = dataclasses.replace(cfg, seeds=(seed,))
    cfg.validate()
    return cfg


def _synth_config(section: dict, seed: int | None, size: int | None,
                  ) -> data.SynthConfig:
    section = dict(section)
    for key in ("proportions", "intensities"):
        if key in section:
            section[key] = tuple(section[key])
    if seed is not None:
        section["seed"] = seed
    if size is not None:
        section["size"] = size
    try:
        cfg = data.SynthConfig(**section)
    except TypeError as exc:
        raise InvalidConfig(f"bad synth config: {exc}") from exc
    cfg.validate()
    return cfg


def _require_out(args, sub: str) -> Path:
    out = args.out or _default_out(sub)
    if out is None:
        raise InvalidConfig("--out is required (or set PAIRFUSE_OUT)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _fid_list(raw: str) -> list[int]:
    raw = raw.strip()
    if not raw:
        raise InvalidConfig("empty fuse-function list")
    try:
        return [int(tok) for tok in raw.split(",")]
    except ValueError as exc:
        raise InvalidConfig(f"bad fuse-function list {raw!r}") from exc


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def cmd_prepare(args) -> int:
    out = _require_out(args, "prepare")
    pairs, records = data.prepare_crops(args.manifest, out,
                                        size=args.size or 32,
                                        margin=args.margin)
    counts = data.class_counts([r.label for r in records if r.split == "train"])
    print(f"prepared {len(pairs)} crop pairs -> {out}")
    print(f"train class counts: {counts.tolist()}")
    return 0


def cmd_synth(args) -> int:
    cfg = _synth_config(_load_config(args.config, args.set)["synth"],
                        args.seed, args.size)
    out = _require_out(args, "synth")
    pairs, records = data.synth_generate(cfg)
    data.write_crop_store(out, pairs, records)
    counts = data.class_counts([r.label for r in records])
    print(f"synthesized {len(pairs)} pairs (class counts {counts.tolist()}) -> {out}")
    return 0


def _write_train_results(results: list[experiment.RunResult], model_cfg,
                         out: Path) -> None:
    """Deterministic metrics file: wall-clock time is excluded on purpose."""
    payload = {
        "schema_version": experiment.RESULTS_SCHEMA_VERSION,
        "model_config_hash": model_cfg.config_hash(),
        "runs": [
            {
                "seed": r.seed,
                "train_loss": r.train_loss,
                "train_acc": r.train_acc,
                "val_loss": r.val_loss,
                "final_train_acc": r.final_train_acc,
                "test_accuracy": r.test_accuracy,
                "test_macro_f1": r.test_macro_f1,
                "per_class_f1": r.per_class_f1,
                "parameter_count": r.parameter_count,
            }
            for r in results
        ],
    }
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def cmd_train(args) -> int:
    cfg_all = _load_config(args.config, args.set)
    train_cfg = _train_config(cfg_all["train"], args.seed)
    model_cfg = _model_config(cfg_all["model"], args.size)
    out = _require_out(args, "train")
    dataset = data.load_crop_store(args.data)
    results = []
    for seed in train_cfg.seeds:
        result, _model = experiment.train(
            train_cfg, model_cfg, dataset, seed=seed,
            checkpoint_path=out / f"ckpt_seed{seed}.npz")
        results.append(result)
        print(f"seed {seed}: train_acc={result.final_train_acc:.4f} "
              f"test_acc={result.test_accuracy:.4f} "
              f"test_f1={result.test_macro_f1:.4f} "
              f"params={result.parameter_count} "
              f"wall={result.wall_time_s:.1f}s")
    _write_train_results(results, model_cfg, out)
    print(f"results -> {out / 'metrics.json'}")
    return 0


def cmd_eval(args) -> int:
    out = _require_out(args, "eval")
    model = models.load_checkpoint(args.checkpoint)
    dataset = data.load_crop_store(args.data)
    pairs = dataset.test if args.split == "test" else dataset.train
    if not pairs:
        raise ValidationError(f"split {args.split!r} is empty")
    dtype = model.params[next(iter(model.params))].dtype
    norm = [
        data.SamplePair(p.pre.astype(dtype), p.post.astype(dtype), p.label)
        for p in (data.normalize(q, dataset.stats) for q in pairs)
    ]
    ev = experiment.evaluate(model, norm)
    with open(out / "eval.json", "w", encoding="utf-8") as fh:
        json.dump(ev, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"accuracy={ev['accuracy']:.4f} macro_f1={ev['macro_f1']:.4f}")
    print(f"confusion={ev['confusion']}")
    return 0


def cmd_grid(args) -> int:
    cfg_all = _load_config(args.config, args.set)
    train_cfg = _train_config(cfg_all["train"], args.seed)
    model_cfg = _model_config(cfg_all["model"], args.size)
    h_fids = _fid_list(args.h_fids) if args.h_fids else list(experiment.DEFAULT_GRID_H_FIDS)
    v_fids = _fid_list(args.v_fids) if args.v_fids else list(experiment.DEFAULT_GRID_V_FIDS)
    out = _require_out(args, "grid")
    dataset = data.load_crop_store(args.data)
    grid = experiment.grid_cross_analysis(
        h_fids, v_fids, train_cfg, model_cfg, dataset, out_dir=out,
        jobs=args.jobs)
    for key, cell in sorted(grid.cells.items()):
        if cell.status == "ok":
            print(f"cell {key}: test_acc={cell.mean_test_acc:.4f} "
                  f"test_f1={cell.mean_test_f1:.4f}")
        else:
            print(f"cell {key}: FAILED ({cell.error})")
    print(f"grid -> {out / 'grid.json'}")
    return 0


def cmd_bench(args) -> int:
    out = _require_out(args, "bench")
    fids = _fid_list(args.fids) if args.fids else list(range(1, 14))
    shape = tuple(int(x) for x in args.shape.split(","))
    rep = experiment.bench_fuse_overhead(shape=shape, fids=fids,
                                         n_inputs=args.n, warmup=args.warmup,
                                         seed=args.seed or 0)
    experiment.persist_results(rep, out / "bench.json")
    base = rep.summary["baseline"]["median_s"] * 1e3
    print(f"baseline median {base:.4f} ms over {rep.summary['baseline']['count']} samples")
    for fid in fids:
        s = rep.summary[f"fid_{fid}"]
        print(f"fuse {fid}: median {s['median_s']*1e3:.4f} ms "
              f"(x{s['overhead_ratio']:.2f})")
    print(f"report -> {out / 'bench.json'}")
    return 0


def cmd_report(args) -> int:
    out = _require_out(args, "report")
    loaded = experiment.load_results(args.results)
    if isinstance(loaded, experiment.GridResult):
        report.save_grid_heatmap(loaded, out / "grid_heatmap.png")
        rows = report.save_top_table(loaded, out / "top5.csv")
        experiment.write_grid_csv(loaded, out / "grid.csv")
        print(f"top cells: {rows}")
        print(f"wrote {out / 'grid_heatmap.png'} and {out / 'top5.csv'}")
    elif isinstance(loaded, experiment.BenchReport):
        report.save_bench_plot(loaded, out / "bench_latency.png")
        report.save_bench_csv(loaded, out / "bench_summary.csv")
        print(f"wrote {out / 'bench_latency.png'} and {out / 'bench_summary.csv'}")
    else:
        raise ValidationError(f"no report for results kind {type(loaded).__name__}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pairfuse",
        description="Feature-fusion experiments on pre/post image pairs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, jobs=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="SEC.KEY=VAL",
                       help="override a config entry (JSON-parsed value)")
        p.add_argument("--out", help="output directory (default: $PAIRFUSE_OUT/<cmd>)")
        p.add_argument("--seed", type=int, help="override the run seed(s)")
        p.add_argument("--size", type=int, help="crop / model input size")
        if jobs:
            p.add_argument("--jobs", type=int, default=1,
                           help="parallel grid cells (default 1)")

    p = sub.add_parser("prepare", help="cut min-area-rect crops from a manifest")
    common(p)
    p.add_argument("--manifest", required=True, help="JSONL building manifest")
    p.add_argument("--margin", type=float, default=0.0,
                   help="extra pixels around each building rectangle")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate the synthetic paired dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the configured model")
    common(p)
    p.add_argument("--data", required=True, help="crop store directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a crop store")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="H x V fuse-function cross-analysis")
    common(p, jobs=True)
    p.add_argument("--data", required=True)
    p.add_argument("--h-fids", help="comma list of horizontal fuse ids")
    p.add_argument("--v-fids", help="comma list of vertical fuse ids")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("bench", help="fusion-overhead microbenchmark")
    common(p)
    p.add_argument("--fids", help="comma list of fuse ids (default all 13)")
    p.add_argument("--n", type=int, default=1000, help="inputs to time")
    p.add_argument("--warmup", type=int, default=50,
                   help="initial samples excluded from summaries")
    p.add_argument("--shape", default="1,8,32,32", help="input shape N,C,H,W")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="emit plots and tables from results")
    common(p)
    p.add_argument("--results", required=True, help="persisted results JSON")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvalidConfig, ValidationError, ParseError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (PairfuseError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
