"""``vq-em`` command-line entry point.

Commands::

    vq-em cluster    --config PATH [--seed N] [--out DIR]
    vq-em train      --config PATH [--seed N] [--out DIR]
    vq-em eval       --config PATH [--seed N] [--out DIR] [--checkpoint DIR]
    vq-em stability  --config PATH [--seed N] [--out DIR]

Exit codes: 0 success, 2 config error, 3 data error, 4 diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from . import codebook, config, data, hard_em, trainer
from .nn import DivergenceError

logger = logging.getLogger("vqem")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def load_data(cfg: config.RunConfig) -> data.Dataset:
    if cfg.data == data.SYNTHETIC:
        arr = data.synthetic_manifold(n=cfg.data_n, seed=cfg.data_seed)
        ds = data.Dataset(arr, data.SYNTHETIC, "synthetic", arr.shape)
        return data.standardize_dataset(ds) if cfg.standardize else ds
    return data.load_dataset(cfg.data, standardize=cfg.standardize)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def cmd_cluster(cfg: config.RunConfig, out: Path | None) -> dict:
    ds = load_data(cfg)
    K = cfg.train.K
    if ds.n < K:
        raise data.DataError(f"need at least K={K} rows, dataset has {ds.n}")
    result = hard_em.kmeans_fit(ds.data, K, cfg.max_iters, cfg.train.seed)
    stats = codebook.usage_stats(result.assignments, K)
    summary = {
        "objective": result.objective,
        "iterations": result.iterations,
        "converged": result.converged,
        "K": K,
        "N": ds.n,
        "usage_histogram": stats.hit_counts.tolist(),
        "usage_perplexity": stats.usage_perplexity,
        "dead_codes": stats.dead_codes,
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        codebook.save(hard_em.result_to_codebook(result, cfg.train.decay), out / trainer.CODEBOOK_FILE)
        _write_json(out / "cluster_summary.json", summary)
    return summary


class _JsonlSink:
    def __init__(self, fh):
        self.fh = fh

    def __call__(self, rec: trainer.MetricsRecord) -> None:
        self.fh.write(rec.to_json() + "\n")
        self.fh.flush()


def _open_metrics(out: Path | None):
    if out is None:
        return sys.stdout, False
    out.mkdir(parents=True, exist_ok=True)
    return open(out / "metrics.jsonl", "w"), True


def cmd_train(cfg: config.RunConfig, out: Path | None) -> trainer.TrainResult:
    ds = load_data(cfg)
    fh, close = _open_metrics(out)
    try:
        if out is not None:
            (out / "config.txt").write_text(config.dumps(cfg))
        return trainer.run_training(cfg, ds.data, out_dir=out, sink=_JsonlSink(fh), norm=(ds.mean, ds.std))
    finally:
        if close:
            fh.close()


def cmd_eval(cfg: config.RunConfig, checkpoint: Path, out: Path | None) -> dict:
    try:
        state, cb, mean, std = trainer.load_checkpoint(checkpoint)
    except (OSError, ValueError) as exc:
        raise data.DataError(f"cannot load checkpoint {checkpoint}: {exc}") from exc
    ds = load_data(cfg)
    x = ds.data
    if mean is not None and not cfg.standardize:
        x = data.apply_normalization(x, mean, std)
    if x.shape[1] != state.config.input_dim:
        raise data.DataError(f"data has {x.shape[1]} features, checkpoint expects {state.config.input_dim}")
    report = trainer.run_eval(cfg, state, cb, x, seed=cfg.train.seed)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "eval.json", report)
    return report


def cmd_stability(cfg: config.RunConfig, out: Path | None) -> trainer.StabilityReport:
    ds = load_data(cfg)
    fh, close = (None, False)
    sink = None
    if out is not None:
        fh, close = _open_metrics(out)
        sink = _JsonlSink(fh)
    try:
        report, _ = trainer.run_stability(cfg, ds.data, sink=sink)
    finally:
        if close:
            fh.close()
    if out is not None:
        _write_json(out / "stability.json", report.to_dict())
        (out / "stability.csv").write_text(trainer.stability_csv(report))
    return report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vq-em", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("cluster", "train", "eval", "stability"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, default=None)
        if name == "eval":
            p.add_argument("--checkpoint", type=Path, default=None,
                           help="checkpoint directory (defaults to --out)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"seed": args.seed} if args.seed is not None else None
    try:
        cfg = config.load_config(args.config, overrides)
    except config.ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "cluster":
            summary = cmd_cluster(cfg, args.out)
            print(json.dumps({k: v for k, v in summary.items() if k != "usage_histogram"}, sort_keys=True))
        elif args.command == "train":
            cmd_train(cfg, args.out)
        elif args.command == "eval":
            ckpt = args.checkpoint or args.out
            if ckpt is None:
                print("eval needs --checkpoint or --out", file=sys.stderr)
                return EXIT_CONFIG
            print(json.dumps(cmd_eval(cfg, ckpt, args.out), sort_keys=True))
        elif args.command == "stability":
            report = cmd_stability(cfg, args.out)
            for m in report.modes:
                print(json.dumps({"mode": m.mode, "final_usage_perplexity": m.final_usage_perplexity,
                                  "steps_to_collapse": m.steps_to_collapse}))
            print(f"# {report.note}", file=sys.stderr)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (data.DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
