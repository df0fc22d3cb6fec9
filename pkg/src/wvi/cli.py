"""Command-line surface.

Subcommands: train, eval, sinkhorn, perturb, generate. Exit code 1 covers
configuration and data problems, 2 covers numerical aborts.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import kernels, metrics
from .config import ConfigError, parse_config
from .costs import METRICS
from .data import (DataError, DatasetHandle, SYNTH_KINDS, load_mnist_idx,
                   load_points_csv, synth_dataset, write_pgm)
from .models import load_checkpoint
from .ot import CostMatrix, SinkhornConfig, SinkhornUnderflowError, sinkhorn_plan, sinkhorn_value
from .trainer import TrainingAbort, train_run

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wvi", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None, help="override train.seed")
    p_train.add_argument("--debias", choices=("on", "off"), default=None)
    p_train.add_argument("--out-dir", default=None, help="override output.dir")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("dataset", help=f"IDX file or one of {SYNTH_KINDS}")
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out-dir", default=".")
    p_eval.add_argument("--downsample", type=int, default=1)
    p_eval.add_argument("--count", type=int, default=1000,
                        help="points for a synthetic dataset")

    p_sink = sub.add_parser("sinkhorn", help="transport divergence between two point files")
    p_sink.add_argument("file_a")
    p_sink.add_argument("file_b")
    p_sink.add_argument("--epsilon", type=float, default=0.1)
    p_sink.add_argument("--iterations", type=int, default=1000)
    p_sink.add_argument("--metric", choices=METRICS, default="euclidean")
    p_sink.add_argument("--plan-out", default=None, help="write the plan as CSV")

    p_pert = sub.add_parser("perturb", help="weight-perturbation robustness runs")
    p_pert.add_argument("--config", required=True)
    p_pert.add_argument("--runs", type=int, default=5)
    p_pert.add_argument("--seed", type=int, default=None)
    p_pert.add_argument("--out-dir", default=None)

    p_gen = sub.add_parser("generate", help="export samples (and reconstructions) as PGM")
    p_gen.add_argument("checkpoint")
    p_gen.add_argument("--count", type=int, default=16)
    p_gen.add_argument("--out-dir", required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--data", default=None,
                       help="dataset for reconstructions (IDX file or synthetic kind)")
    p_gen.add_argument("--downsample", type=int, default=1)
    return parser


def _apply_overrides(run_cfg, args):
    if getattr(args, "seed", None) is not None:
        run_cfg.values[("train", "seed")] = args.seed
    if getattr(args, "debias", None) is not None:
        run_cfg.values[("train", "debias")] = args.debias == "on"
    if getattr(args, "out_dir", None) is not None:
        run_cfg.values[("output", "dir")] = args.out_dir


def _load_any_dataset(name, downsample, count, seed) -> DatasetHandle:
    if name in SYNTH_KINDS:
        return synth_dataset(name, count, seed)
    if not Path(name).exists():
        raise DataError(f"dataset file does not exist: {name}")
    return load_mnist_idx(name, downsample=downsample)


def cmd_train(args) -> int:
    run_cfg = parse_config(args.config)
    _apply_overrides(run_cfg, args)
    train_cfg = run_cfg.train_config()
    train_data, val_data = run_cfg.build_dataset()
    out_dir = Path(run_cfg[("output", "dir")])
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(train_cfg.seed).spawn(2)
    models = run_cfg.build_models(train_data.dim, np.random.default_rng(seeds[0]))
    meta = {"weights": ",".join(f"{w:.17g}" for w in train_cfg.weights.as_tuple())}
    if train_data.image_shape is not None:
        meta["image_shape"] = ",".join(map(str, train_data.image_shape))
    models, reports = train_run(train_cfg, train_data, models,
                                out_dir=str(out_dir), checkpoint_meta=meta)
    values = metrics.evaluate(models, val_data,
                              n_eval=run_cfg[("output", "n_eval")],
                              n_gen=run_cfg[("output", "n_gen")],
                              rng=np.random.default_rng(seeds[1]))
    report = metrics.MetricReport(run_id=0, latent_mse=values["latent"],
                                  observable_mse=values["observable"],
                                  sample_quality=values["sample"],
                                  weights=train_cfg.weights, seed=train_cfg.seed)
    metrics.write_metric_csv(out_dir / "metrics.csv", [report])
    if reports:
        print(f"steps: {len(reports)}, first loss: {reports[0].loss:.6g}, "
              f"final loss: {reports[-1].loss:.6g}")
    for name, value in values.items():
        print(f"{name}: {value:.6g}")
    print(f"outputs in {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    models, meta = load_checkpoint(args.checkpoint)
    dataset = _load_any_dataset(args.dataset, args.downsample, args.count, args.seed)
    if dataset.dim != models.observable_dim:
        print(f"error: checkpoint expects {models.observable_dim}-dim observables, "
              f"dataset rows have {dataset.dim}", file=sys.stderr)
        return EXIT_USAGE
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    values = metrics.evaluate(models, dataset, n_eval=512, n_gen=64, rng=rng)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = metrics.MetricReport(run_id=0, latent_mse=values["latent"],
                                  observable_mse=values["observable"],
                                  sample_quality=values["sample"],
                                  weights=_checkpoint_weights(meta), seed=args.seed)
    metrics.write_metric_csv(out_dir / "eval_metrics.csv", [report])
    for name, value in values.items():
        print(f"{name}: {value:.6g}")
    return EXIT_OK


def _checkpoint_weights(meta):
    from .costs import WeightVector

    text = meta.get("weights")
    if text:
        w1, w2, w3, w4, w5 = (float(v) for v in text.split(","))
        return WeightVector(w1, w2, w3, w4, w5)
    return WeightVector(w1=1.0)


def cmd_sinkhorn(args) -> int:
    points_a = load_points_csv(args.file_a)
    points_b = load_points_csv(args.file_b)
    if points_a.shape[1] != points_b.shape[1]:
        raise DataError(f"point dimensions differ: {points_a.shape[1]} vs "
                        f"{points_b.shape[1]}")
    sq = kernels.pairwise_sqdist(np.ascontiguousarray(points_a),
                                 np.ascontiguousarray(points_b))
    costs = sq if args.metric == "sqeuclidean" else np.sqrt(sq)
    matrix = CostMatrix(costs)
    n, m = matrix.shape
    r = np.full(n, 1.0 / n)
    c = np.full(m, 1.0 / m)
    cfg = SinkhornConfig(epsilon=args.epsilon, iterations=args.iterations)
    value = float(sinkhorn_value(matrix, r, c, cfg).data)
    coupling = sinkhorn_plan(matrix, r, c, cfg)
    print(f"value: {value:.12g}")
    print(f"max_marginal_violation: {coupling.max_marginal_violation:.6g}")
    print(f"iterations_run: {coupling.iterations_run}")
    if args.plan_out:
        with open(args.plan_out, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in coupling.plan:
                writer.writerow([f"{v:.17g}" for v in row])
        print(f"plan written to {args.plan_out}")
    return EXIT_OK


def cmd_perturb(args) -> int:
    run_cfg = parse_config(args.config)
    _apply_overrides(run_cfg, args)
    base_cfg = run_cfg.train_config()
    train_data, val_data = run_cfg.build_dataset()
    out_dir = Path(run_cfg[("output", "dir")])
    out_dir.mkdir(parents=True, exist_ok=True)

    def factory(rng):
        return run_cfg.build_models(train_data.dim, rng)

    summary, reports = metrics.perturbation_harness(
        base_cfg, factory, train_data, val_data, n_runs=args.runs,
        seed=base_cfg.seed, n_eval=run_cfg[("output", "n_eval")],
        n_gen=run_cfg[("output", "n_gen")])
    metrics.write_metric_csv(out_dir / "perturbation.csv", reports, summary=summary)
    print(metrics.format_summary_table(summary))
    print(f"per-run results in {out_dir / 'perturbation.csv'}")
    return EXIT_OK


def cmd_generate(args) -> int:
    models, meta = load_checkpoint(args.checkpoint)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if "image_shape" in meta:
        shape = tuple(int(v) for v in meta["image_shape"].split(","))
    else:
        shape = (1, models.observable_dim)
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    index_rows = []
    if args.count > 0:
        z = rng.standard_normal((args.count, models.latent_dim))
        samples = models.decoder.forward_array(z)
        for i, row in enumerate(samples):
            name = f"sample_{i:04d}.pgm"
            write_pgm(out_dir / name, row.reshape(shape))
            index_rows.append((name, "sample", i))
        if args.data is not None:
            dataset = _load_any_dataset(args.data, args.downsample, args.count, args.seed)
            if dataset.dim != models.observable_dim:
                raise DataError(f"checkpoint expects {models.observable_dim}-dim rows, "
                                f"dataset has {dataset.dim}")
            originals = dataset.examples[: args.count]
            recon = models.decoder.forward_array(models.encoder.forward_array(originals))
            for i, (orig, rec) in enumerate(zip(originals, recon)):
                oname, rname = f"original_{i:04d}.pgm", f"reconstruction_{i:04d}.pgm"
                write_pgm(out_dir / oname, orig.reshape(shape))
                write_pgm(out_dir / rname, rec.reshape(shape))
                index_rows.append((oname, "original", i))
                index_rows.append((rname, "reconstruction", i))
        with open(out_dir / "index.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["file", "kind", "index"])
            writer.writerows(index_rows)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"train": cmd_train, "eval": cmd_eval, "sinkhorn": cmd_sinkhorn,
                "perturb": cmd_perturb, "generate": cmd_generate}
    try:
        return handlers[args.command](args)
    except (ConfigError, DataError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAbort, SinkhornUnderflowError) as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
