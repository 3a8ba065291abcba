"""Command-line orchestration: simulate, attack, tune, report.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import data as datamod
from . import fedavg, metrics, models
from .attack import AttackConfig, WeightVector, make_target, reconstruct
from .config import ConfigError, ExperimentConfig, derive_seed, load_config
from .tuning import BoConfig, trial_rows, tune_attack


def _float_repr(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.17g}"
    return str(v)


def _json_default(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    raise TypeError(f"not serializable: {v!r}")


def _write_json(path, payload):
    def walk(obj):
        if isinstance(obj, dict):
            return {k: walk(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [walk(v) for v in obj]
        if isinstance(obj, float) and math.isinf(obj):
            return "inf"
        if isinstance(obj, (np.integer,)):
            return int(obj)
        if isinstance(obj, (np.floating,)):
            return float(obj)
        return obj
    with open(path, "w") as fh:
        json.dump(walk(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_float_repr(row[c]) for c in columns])


def _build_world(cfg: ExperimentConfig):
    """Model, dataset, and training config from one experiment config."""
    seeds = cfg.seeds()
    arch, params = models.build_model(cfg.arch, seeds["model-init"],
                                      cfg.image_shape, cfg.n_classes)
    x, y = datamod.make_dataset(cfg.source, cfg.image_shape, cfg.n,
                                seeds["data"], cfg.n_classes)
    return arch, params, x, y, cfg.training_config()


def _sidecar_extra(cfg: ExperimentConfig):
    return {
        "n_classes": cfg.n_classes,
        "image_shape": list(cfg.image_shape),
        "source": cfg.source,
        "master_seed": cfg.master_seed,
        "warmup_rounds": cfg.warmup_rounds,
    }


def cmd_simulate(cfg: ExperimentConfig, out_dir):
    """One recorded FedAvg round (after optional warm-up rounds)."""
    arch, params, x, y, tc = _build_world(cfg)
    theta = params
    for r in range(cfg.warmup_rounds):
        theta, _ = fedavg.client_update(theta, x, y, tc, round_index=r)
        theta = fedavg.server_aggregate([(theta, cfg.n)])
    record, _ = fedavg.simulate_round(theta, x, y, tc,
                                      round_index=cfg.warmup_rounds)
    fedavg.save_round(record, out_dir, extra=_sidecar_extra(cfg))
    print(f"wrote round record to {out_dir}")
    return 0


def _load_record(cfg: ExperimentConfig, record_dir):
    seeds = cfg.seeds()
    arch, _ = models.build_model(cfg.arch, seeds["model-init"],
                                 cfg.image_shape, cfg.n_classes)
    record, sidecar = fedavg.load_round(record_dir, arch)
    if sidecar["arch"] != cfg.arch:
        raise ConfigError(
            f"record architecture {sidecar['arch']} != config {cfg.arch}")
    return record, sidecar


def _attack_config(cfg: ExperimentConfig):
    return AttackConfig(iterations=cfg.iterations, eta_hat=cfg.eta_hat,
                        loss_kind=cfg.loss, target_epoch=cfg.target_epoch,
                        optimize_labels=cfg.optimize_labels,
                        init_seed=derive_seed(cfg.master_seed, "dummy-init"))


def _score_and_write(cfg, out, truth, labels, result, extra):
    report = metrics.score_batch(truth, result.x)
    report.update(extra)
    report["f_value"] = result.f_value
    report["diverged"] = result.diverged
    _write_json(out / "metrics.json", report)
    datamod.write_batch(out, metrics.clamp01(result.x))
    rows = [{"iteration": r.iteration, "loss_weighted": r.loss_weighted,
             "loss_unweighted": r.loss_unweighted,
             "weights_hash": r.weights_hash, "elapsed_s": r.elapsed_s}
            for r in result.trace]
    _write_csv(out / "attack_trace.csv", rows,
               ["iteration", "loss_weighted", "loss_unweighted",
                "weights_hash", "elapsed_s"])
    return report


def cmd_attack(cfg: ExperimentConfig, record_dir, out_dir):
    """One reconstruction at a fixed weight vector (or unweighted)."""
    record, _ = _load_record(cfg, record_dir)
    seeds = cfg.seeds()
    truth, labels = datamod.make_dataset(cfg.source, cfg.image_shape, cfg.n,
                                         seeds["data"], cfg.n_classes)
    atk = _attack_config(cfg)
    q = None
    if cfg.loss == "weighted":
        q = WeightVector.from_array(np.asarray(
            cfg.q_fixed if cfg.q_fixed is not None
            else (1.0, 1.0, 1.0, 1.0, 0.0, 0.0)))
    target = make_target(record, atk)
    x0 = truth if cfg.init_truth else None
    result = reconstruct(q, target.update, target.theta_start, target.config,
                         atk, labels, x0=x0)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = _score_and_write(cfg, out, truth, labels, result, {
        "mode": "attack", "loss": cfg.loss,
        "case": {"N": cfg.n, "E": cfg.epochs, "B": cfg.batches},
        "q": None if q is None else list(q.as_array()),
    })
    if result.diverged:
        print(f"attack diverged; partial outputs in {out_dir}")
        return 2
    print(f"attack done: batch-mean SSIM "
          f"{report['batch_mean']['ssim']:.4f} -> {out_dir}")
    return 0


def cmd_tune(cfg: ExperimentConfig, record_dir, out_dir):
    """Full weight search plus final reconstruction at the winner."""
    record, _ = _load_record(cfg, record_dir)
    seeds = cfg.seeds()
    truth, labels = datamod.make_dataset(cfg.source, cfg.image_shape, cfg.n,
                                         seeds["data"], cfg.n_classes)
    atk = _attack_config(cfg)
    bo = BoConfig(n_bo=cfg.n_bo, n_init=cfg.n_init, seed=seeds["bo"])
    t0 = time.perf_counter()
    result = tune_attack(record, atk, bo, labels)
    elapsed = time.perf_counter() - t0
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "trials.csv", trial_rows(result),
               ["trial", "phase", "q_cv", "q_bn", "q_fc", "q_en",
                "p_mean", "p_var", "f", "cumulative_min"])
    _write_json(out / "q_star.json",
                dict(zip(WeightVector.field_names(),
                         result.q_star.as_array().tolist())))
    report = _score_and_write(cfg, out, truth, labels, result.final, {
        "mode": "tune", "loss": "weighted",
        "case": {"N": cfg.n, "E": cfg.epochs, "B": cfg.batches},
        "q": list(result.q_star.as_array()),
    })
    _write_json(out / "timing.json", {"tune_seconds": elapsed})
    print(f"tuned {len(result.trials)} trials; best f "
          f"{min(t.f for t in result.trials):.6g}; batch-mean SSIM "
          f"{report['batch_mean']['ssim']:.4f} -> {out_dir}")
    return 0


REPORT_COLUMNS = ["run", "mode", "N", "E", "B", "mse", "psnr", "ssim"]


def cmd_report(run_dirs, out_path=None):
    """Aggregate metrics.json files into one comparison table (CSV)."""
    rows = []
    warnings_ = []
    for run in run_dirs:
        path = Path(run) / "metrics.json"
        if not path.is_file():
            warnings_.append(f"# missing metrics: {path}")
            continue
        with open(path) as fh:
            report = json.load(fh)
        mean = report["batch_mean"]
        case = report.get("case", {})
        rows.append({
            "run": str(run), "mode": report.get("mode", "?"),
            "N": case.get("N", ""), "E": case.get("E", ""),
            "B": case.get("B", ""),
            "mse": mean["mse"], "psnr": mean["psnr"], "ssim": mean["ssim"],
        })
    lines = [",".join(REPORT_COLUMNS)]
    for row in rows:
        lines.append(",".join(_float_repr(row[c]) for c in REPORT_COLUMNS))
    lines.extend(warnings_)
    text = "\n".join(lines) + "\n"
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)
    return 0 if rows or not run_dirs else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gradinv",
        description="FedAvg data reconstruction attack lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, record=False):
        p.add_argument("--config", type=Path, default=None,
                       help="INI experiment file")
        p.add_argument("--out", type=Path, required=True,
                       help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="master seed override")
        p.add_argument("--case", type=int, choices=(1, 2, 3, 4), default=None,
                       help="preset FedAvg regime (N=4)")
        if record:
            p.add_argument("--record", type=Path, required=True,
                           help="directory with a recorded round")

    common(sub.add_parser("simulate", help="run one recorded FedAvg round"))
    common(sub.add_parser("attack", help="reconstruct from a recorded round"),
           record=True)
    common(sub.add_parser("tune", help="tune layer weights, then attack"),
           record=True)
    rep = sub.add_parser("report", help="aggregate run metrics into a table")
    rep.add_argument("runs", nargs="+", type=Path)
    rep.add_argument("--out", type=Path, default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.runs, args.out)
        cfg = load_config(args.config, case=args.case, seed=args.seed,
                          out_dir=str(args.out))
        if args.command == "simulate":
            return cmd_simulate(cfg, args.out)
        if args.command == "attack":
            return cmd_attack(cfg, args.record, args.out)
        if args.command == "tune":
            return cmd_tune(cfg, args.record, args.out)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
