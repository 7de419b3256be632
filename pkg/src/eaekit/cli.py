"""Command-line front end.

    eaekit train      --config run.json [--seed N] [--out DIR]
    eaekit seed-stats --config run.json
    eaekit bench      --config run.json
    eaekit attack     --config run.json [--verify]

Exit codes: 0 success, 2 configuration error, 3 numeric abort,
4 invariant violation.
"""

import argparse
import contextlib
import json
import os
import sys

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from .attacks import attack_dataset, linf_violation
from .config import load_config, load_datasets
from .eae import EmptySeedSetError, ld_stats, partition_seeds, threshold_from_partition
from .errors import ConfigError, FormatError, NumericAbort
from .evalbench import (
    build_transfer_suite,
    emit_bar_chart_svg,
    emit_histogram_svg,
    emit_report,
    ensure_dir,
    report_from_run,
    source_preset_for,
    write_rows_csv,
)
from .nn import build_model, load_checkpoint, save_checkpoint
from .train import TrainSpec, train, train_time_benchmark

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INVARIANT = 0, 2, 3, 4

TIMING_NOTE = "sec_per_epoch is the median per-epoch compute time; data loading and the first (warm-up) epoch are excluded"


class InvariantViolation(RuntimeError):
    pass


def _threads():
    return sum(info.get("num_threads", 0) for info in threadpool_info()) or 1


def _limits(cfg):
    return threadpool_limits(1) if cfg.single_threaded else contextlib.nullcontext()


def _out_dir(cfg):
    return ensure_dir(cfg.out or "out")


def _require_train(cfg):
    if cfg.train is None:
        raise ConfigError("missing required field", field="train")
    return cfg.train


def _source_model(cfg, train_set, spec):
    preset = cfg.evaluation.get("source_model") or source_preset_for(cfg.model, train_set.sample_shape)
    epochs = cfg.evaluation.get("source_epochs", spec.epochs)
    src_spec = TrainSpec("normal", epochs, spec.batch_size, spec.clr_min, spec.clr_max, seed=spec.seed + 1000)
    src = build_model(preset, train_set.sample_shape, train_set.num_classes, seed=cfg.seed + 1000)
    train(src, train_set, src_spec)
    return src


def _metadata(cfg):
    return {"threads": _threads(), "single_threaded": cfg.single_threaded, "timing_note": TIMING_NOTE}


def cmd_train(cfg):
    spec = _require_train(cfg)
    train_set, test_set = load_datasets(cfg.dataset)
    out = _out_dir(cfg)
    model = build_model(cfg.model, train_set.sample_shape, train_set.num_classes, seed=cfg.seed)
    _, instr, history = train(model, train_set, spec)
    suite = None
    if cfg.attacks:
        if cfg.evaluation.get("mode", "transfer") == "white-box":
            src = model
        else:
            src = _source_model(cfg, train_set, spec)
        suite = build_transfer_suite(src, test_set, cfg.attacks)
    report = report_from_run(
        spec.method, model, instr, test_set, suite, config=cfg.raw, seed=cfg.seed, metadata=_metadata(cfg)
    )
    report.metadata["final_train_loss"] = history[-1]["loss"]
    save_checkpoint(model, os.path.join(out, "model.ckpt"))
    emit_report([report], os.path.join(out, "report.json"), "json")
    emit_report([report], os.path.join(out, "report.csv"), "csv")
    write_rows_csv(history, os.path.join(out, "metrics.csv"), ["epoch", "loss", "train_acc", "gated_fraction", "seconds", "lr"])
    print(f"{spec.method}: clean_acc={report.clean_acc:.4f} -> {out}")
    return EXIT_OK


def _model_for_stats(cfg, train_set):
    if cfg.checkpoint:
        try:
            return load_checkpoint(cfg.checkpoint)
        except (OSError, FormatError) as exc:
            raise ConfigError(str(exc), field="checkpoint") from None
    spec = _require_train(cfg)
    model = build_model(cfg.model, train_set.sample_shape, train_set.num_classes, seed=cfg.seed)
    train(model, train_set, spec)
    return model


def cmd_seed_stats(cfg):
    if not cfg.attacks:
        raise ConfigError("seed-stats needs at least one attack", field="attacks")
    train_set, test_set = load_datasets(cfg.dataset)
    out = _out_dir(cfg)
    model = _model_for_stats(cfg, train_set)
    records = []
    hist_written = False
    for spec in cfg.attacks:
        part = partition_seeds(model, test_set, spec)
        rec = part.summary()
        try:
            rec["gamma"] = threshold_from_partition(part)
        except EmptySeedSetError as exc:
            rec["gamma"] = None
            rec["warning"] = str(exc)
        pos, neg = part.seed_lds(), part.non_seed_lds()
        rec["ld_stats_seed"] = ld_stats(pos, cfg.histogram_bin_width).to_dict() if pos.size else None
        rec["ld_stats_non_seed"] = ld_stats(neg, cfg.histogram_bin_width).to_dict() if neg.size else None
        if pos.size and neg.size:
            sp, sn = ld_stats(pos, cfg.histogram_bin_width), ld_stats(neg, cfg.histogram_bin_width)
            emit_histogram_svg(sp, sn, os.path.join(out, f"ld_hist_eps{spec.epsilon:g}.svg"))
            if not hist_written:
                emit_histogram_svg(sp, sn, os.path.join(out, "ld_hist.svg"))
                hist_written = True
        records.append(rec)
        print(
            f"eps={spec.epsilon:g}: seeds={rec['n_seed']} non_seeds={rec['n_non_seed']} "
            f"gamma={rec['gamma']}" + (f" warning: {rec['warning']}" if rec["warning"] else "")
        )
    with open(os.path.join(out, "seed_stats.json"), "w", encoding="utf-8") as fh:
        json.dump({"records": records}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


def cmd_bench(cfg):
    if not cfg.bench:
        raise ConfigError("missing required field", field="bench")
    train_set, test_set = load_datasets(cfg.dataset)
    out = _out_dir(cfg)
    rows = train_time_benchmark(cfg.bench, train_set, cfg.model, model_seed=cfg.seed)
    suite = None
    if cfg.attacks:
        ref = cfg.bench[0]
        if cfg.bench_source:
            cfg.evaluation.setdefault("source_model", cfg.bench_source)
        suite = build_transfer_suite(_source_model(cfg, train_set, ref), test_set, cfg.attacks)
    reports = []
    for row, spec in zip(rows, cfg.bench):
        rep = report_from_run(
            spec.method, row["model"], row["instrumentation"], test_set, suite,
            config=spec.to_dict(), seed=cfg.seed, metadata=_metadata(cfg),
        )
        reports.append(rep)
        row["clean_acc"] = rep.clean_acc
    emit_report(reports, os.path.join(out, "bench.json"), "json")
    emit_report(reports, os.path.join(out, "bench.csv"), "csv")
    write_rows_csv(rows, os.path.join(out, "timing.csv"), ["method", "sec_per_epoch", "forward", "param_bwd", "input_grad_bwd", "clean_acc"])
    methods = [r["method"] for r in rows]
    series = {
        "sec/epoch": [r["sec_per_epoch"] for r in rows],
        "clean acc": [r["clean_acc"] for r in rows],
    }
    emit_bar_chart_svg(methods, series, "per-epoch time and clean accuracy", os.path.join(out, "summary.svg"))
    for r in rows:
        print(f"{r['method']}: {r['sec_per_epoch']:.3f} s/epoch, param_bwd={r['param_bwd']}, input_grad_bwd={r['input_grad_bwd']}")
    return EXIT_OK


def verify_perturbed_file(path, clean_inputs):
    with np.load(path) as f:
        return linf_violation(f["x_adv"], clean_inputs, float(f["epsilon"]))


def cmd_attack(cfg, verify=False):
    if not cfg.checkpoint:
        raise ConfigError("missing required field", field="checkpoint")
    if not cfg.attacks:
        raise ConfigError("attack needs at least one attack", field="attacks")
    try:
        model = load_checkpoint(cfg.checkpoint)
    except (OSError, FormatError) as exc:
        raise ConfigError(str(exc), field="checkpoint") from None
    _, test_set = load_datasets(cfg.dataset)
    out = _out_dir(cfg)
    summary = []
    for i, spec in enumerate(cfg.attacks):
        result = attack_dataset(model, test_set.inputs, test_set.labels, spec)
        path = os.path.join(out, f"perturbed_{i:02d}_{spec.kind}.npz")
        np.savez(path, x_adv=result.x_adv, labels=test_set.labels, epsilon=np.float64(spec.epsilon))
        rate = float(result.success_mask.mean()) if len(result.success_mask) else 0.0
        summary.append({"attack": spec.to_dict(), "file": os.path.basename(path), "success_rate": rate})
        print(f"{spec.label()}: success_rate={rate:.4f} (n={len(test_set)}) -> {path}")
        if verify:
            excess = verify_perturbed_file(path, test_set.inputs)
            if excess > 0:
                raise InvariantViolation(f"{path}: epsilon-ball exceeded by {excess:g}")
    with open(os.path.join(out, "attack_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "seed-stats": cmd_seed_stats, "bench": cmd_bench, "attack": cmd_attack}


def build_parser():
    parser = argparse.ArgumentParser(prog="eaekit", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory (default: config 'out' or ./out)")
        if name == "attack":
            p.add_argument("--verify", action="store_true", help="re-check the epsilon-ball on written files")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        with _limits(cfg):
            if args.command == "attack":
                return cmd_attack(cfg, verify=args.verify)
            return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
