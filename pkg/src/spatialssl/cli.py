"""Command-line entry point: ``spatialssl <subcommand> ...``.

Exit codes: 0 success, 1 validation error, 2 numeric failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig
from .numerics import NumericOverflowError
from .sampler import SamplingExhausted, build_coupled_unit, regions_manifest, sample_subregions
from .trainer import (CheckpointFormatError, TrainingAborted, collect_diagnostics, evaluate, gradcheck_losses,
                      initial_checkpoint, load_checkpoint, region_sizes, save_checkpoint, tiny_config, train,
                      volume_pool)
from .volume import save_raw, synth_volume

log = logging.getLogger("spatialssl")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
OUT_ENV = "SPATIALSSL_OUT"
RESOLVED = "config.resolved.ini"

CRSC_HEADER = ("unit", "cos_adj", "cos_dst", "correct")
GAP_HEADER = ("g_true", "g_pred")
ARROW_HEADER = ("start_z", "start_y", "start_x", "pred_z", "pred_y", "pred_x", "true_z", "true_y", "true_x", "iter")


class NumericFailure(RuntimeError):
    pass


def _config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if getattr(args, "config", None) else TrainConfig()
    cfg.override(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
    cfg.validate()
    return cfg


def _out_dir(args, command: str) -> Path:
    out = getattr(args, "out", None)
    if out is None:
        out = Path(os.environ.get(OUT_ENV, "runs")) / command
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, "gen-data")
    cfg.save(out / RESOLVED)
    spec = cfg.phantom.spec()
    seeds = [cfg.run.seed + i for i in range(args.count)]
    files = []
    for seed in seeds:
        stem = out / f"volume_{seed:06d}"
        save_raw(synth_volume(spec, seed), stem, seed=seed)
        files.append(stem.name)
    manifest = {"phantom": cfg.to_dict()["phantom"], "seeds": seeds, "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(files)} volumes to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    if args.iterations is not None:
        cfg.run.iterations = args.iterations
    out = _out_dir(args, "pretrain")
    cfg.save(out / RESOLVED)
    resume = load_checkpoint(args.resume) if args.resume else None
    every = args.checkpoint_every

    def cb(i, ck, step):
        if every and i % every == 0:
            save_checkpoint(ck, out / f"checkpoint_{i:07d}.ckpt")
        if i % 500 == 0:
            log.info("iter %d  crsc %.4f  gmp %.4f  rbcs %.2f  acc %.3f", i, step.l_crsc, step.l_gmp,
                     step.l_rbcs, step.crsc_acc)

    try:
        ck, _ = train(cfg, resume=resume, metrics_path=out / "metrics.csv", callback=cb, workers=args.workers,
                      diagnostics_path=out / "diagnostics.jsonl" if args.diagnostics else None)
    except TrainingAborted as exc:
        save_checkpoint(exc.checkpoint, out / "last_good.ckpt")
        raise
    save_checkpoint(ck, out / "checkpoint.ckpt")
    print(f"trained to iteration {ck.iteration}; checkpoint at {out / 'checkpoint.ckpt'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    metrics = evaluate(ck, args.volumes, args.seed)
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out is not None:
        out = _out_dir(args, "evaluate")
        ck.config.save(out / RESOLVED)
        (out / "metrics.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    if not args.full_size:
        cfg = tiny_config(cfg)
        cfg.override(args.set or [])
    if args.out is not None:
        cfg.save(_out_dir(args, "gradcheck") / RESOLVED)
    failed = 0
    for name, batch, report in gradcheck_losses(cfg, args.batches, args.tol, args.step,
                                                corrupt=args.corrupt_index, order=args.order):
        print(f"{name:15s} batch {batch:3d}  {report}")
        failed += not report.passed
    if failed:
        raise NumericFailure(f"{failed} gradient checks failed")
    print("all gradient checks passed")
    return EXIT_OK


def write_viz(ck, out: Path, n_volumes: int | None = None, seed: int | None = None) -> dict[str, Path]:
    diag = collect_diagnostics(ck, ck.config.run.eval_volumes if n_volumes is None else n_volumes, seed)
    paths = {"crsc": out / "crsc_pairs.csv", "gap": out / "gap_scatter.csv", "route": out / "route_arrows.csv"}
    _write_csv(paths["crsc"], CRSC_HEADER, [(i, a, d, c) for i, (a, d, c) in enumerate(diag.crsc_pairs)])
    _write_csv(paths["gap"], GAP_HEADER, diag.gap_pairs)
    _write_csv(paths["route"], ARROW_HEADER, [(*row[:-1], int(row[-1])) for row in diag.route_arrows])
    return paths


def cmd_export_viz(args) -> int:
    ck = load_checkpoint(args.checkpoint) if args.checkpoint else initial_checkpoint(_config(args))
    out = _out_dir(args, "export-viz")
    ck.config.save(out / RESOLVED)
    paths = write_viz(ck, out, args.volumes, args.eval_seed)
    for p in paths.values():
        print(p)
    return EXIT_OK


def cmd_inspect_unit(args) -> int:
    cfg = _config(args)
    vol = volume_pool(cfg, [cfg.run.seed])[0]
    rng = np.random.default_rng(cfg.run.seed)
    p, v = region_sizes(cfg, vol.spacing)
    r1, r2 = sample_subregions(vol, 2, p, cfg.sampling.min_fg, rng, cfg.sampling.fg_threshold,
                               mode=cfg.sampling.mode)
    unit = build_coupled_unit(r1, r2, v)
    report = {
        "volume_id": vol.volume_id,
        "parents": json.loads(regions_manifest([r1, r2]))["regions"],
        "member_size": list(v),
        "members": {name: {"start": list(m.start), "center": [float(c) for c in m.center], "corner": k}
                    for name, m, k in zip(("adj1", "adj2", "dst1", "dst2"), unit.members, unit.corners)},
        "adj_distance_mm": unit.adj_distance,
        "dst_distance_mm": unit.dst_distance,
    }
    text = json.dumps(report, indent=2)
    if args.out is not None:
        out = _out_dir(args, "inspect-unit")
        cfg.save(out / RESOLVED)
        (out / "unit.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatialssl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", help="INI config file (defaults built in)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--out", required=out_required, help=f"output directory (default ${OUT_ENV}/<command>)")

    p = sub.add_parser("gen-data", help="write phantom volumes in the raw format")
    common(p)
    p.add_argument("--count", type=int, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="run the self-supervised pretraining loop")
    common(p)
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--diagnostics", action="store_true", help="also write per-iteration diagnostics.jsonl")
    p.add_argument("--workers", type=int, default=1,
                   help="threads for phantom synthesis; bitwise reproducibility is only guaranteed with 1")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("evaluate", help="held-out metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volumes", type=int)
    p.add_argument("--seed", type=int, help="evaluation seed (default run.eval_seed)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    common(p)
    p.add_argument("--batches", type=int, default=1)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-3, help="finite-difference step")
    p.add_argument("--order", type=int, choices=(2, 4), default=4, help="central stencil order")
    p.add_argument("--full-size", action="store_true", help="check the configured model instead of the tiny one")
    p.add_argument("--corrupt-index", type=int, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-viz", help="plot-ready CSVs for pair classification, gap scatter, route arrows")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint (default: untrained initialization of the config)")
    p.add_argument("--volumes", type=int)
    p.add_argument("--eval-seed", type=int)
    p.set_defaults(func=cmd_export_viz)

    p = sub.add_parser("inspect-unit", help="geometry of one coupled unit as JSON")
    common(p)
    p.set_defaults(func=cmd_inspect_unit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SamplingExhausted) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericOverflowError, TrainingAborted, NumericFailure) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
