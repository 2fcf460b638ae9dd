"""Command-line entry point: ``sflabel {label,eval,synth,bench,print-default-config}``.

Exit status: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import PipelineConfig
from .errors import ConfigError, FormatError, InvalidArgument, OptimizationError
from .evalkit import (
    CSV_HEADER,
    MetricsRecord,
    compute_metrics,
    evaluate_pipeline,
    generate_synthetic_scene,
    load_scene_specs,
)
from .ingest import PointCloud, load_cloud, write_point_binary
from .labelgen import read_sfl, write_label_pair, write_sfl
from .pipeline import fit_pair, make_labels, pair_seed

log = logging.getLogger("sflabel")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
CLOUD_EXTS = (".bin", ".ply")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sflabel", description="Pseudo-auto-labelling of 3D scene flow.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("label", help="fit frame pairs and write augmented flow labels")
    p.add_argument("inputs", nargs="*", help="frame directory, glob or files (.bin/.ply)")
    p.add_argument("--pairs", help="pair list file: one 'source target' per line")
    _common(p, out_default=None)
    p.add_argument("--workers", type=int)
    p.add_argument("--k-aug", type=int, dest="k_aug")

    p = sub.add_parser("eval", help="compare predicted and ground-truth .sfl labels")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--out", help="CSV report path")

    p = sub.add_parser("synth", help="write synthetic oracle scenes")
    p.add_argument("spec")
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench", help="run the synthetic benchmark and write a CSV report")
    p.add_argument("spec")
    _common(p, out_default="bench_report.csv")
    p.add_argument("--workers", type=int)

    sub.add_parser("print-default-config", help="print the default configuration as JSON")
    return ap


def _common(p, out_default):
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--out", default=out_default)
    p.add_argument("--seed", type=int)


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    if getattr(args, "k_aug", None) is not None:
        cfg.augment.k_aug = args.k_aug
    return cfg.validate()


# -- label ------------------------------------------------------------------------


def _stem(path: str) -> str:
    name = os.path.basename(path)
    for ext in CLOUD_EXTS:
        if name.endswith(ext):
            return name[: -len(ext)]
    return name


def resolve_pairs(inputs, pairs_file=None) -> list:
    """``[(pair_id, src_path, tgt_path)]``: explicit list, else consecutive frames by name."""
    if pairs_file:
        base = os.path.dirname(os.path.abspath(pairs_file))
        pairs = []
        with open(pairs_file) as fh:
            for n, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise UsageError(f"{pairs_file}:{n}: expected 'source target'")
                a, b = (p if os.path.isabs(p) else os.path.join(base, p) for p in parts)
                pairs.append((f"{_stem(a)}__{_stem(b)}", a, b))
        return pairs
    files = []
    for item in inputs:
        if os.path.isdir(item):
            files += [os.path.join(item, f) for f in os.listdir(item) if f.endswith(CLOUD_EXTS)]
        else:
            files += [f for f in glob.glob(item) if f.endswith(CLOUD_EXTS)]
    files = sorted(set(files), key=lambda f: (os.path.basename(f), f))
    return [(f"{_stem(a)}__{_stem(b)}", a, b) for a, b in zip(files[:-1], files[1:])]


def label_pair(pair_id: str, src_path: str, tgt_path: str, cfg_dict: dict, out_dir: str) -> dict:
    """Fit one pair and write its ``k_aug`` labels under ``out_dir/pair_id``."""
    cfg = PipelineConfig.from_dict(cfg_dict)
    t0 = time.perf_counter()
    seed = pair_seed(cfg.seed, pair_id)
    fit = fit_pair(load_cloud(src_path), load_cloud(tgt_path), cfg, seed)
    records = make_labels(fit, cfg, seed)
    pair_dir = os.path.join(out_dir, pair_id)
    written = []
    for v, rec in enumerate(records):
        rec.metadata.update(pair_id=pair_id, variant=v, source_file=os.path.basename(src_path),
                            target_file=os.path.basename(tgt_path))
        written.append(write_label_pair(rec, pair_dir, f"{pair_id}_{v:02d}")[0])
    return {
        "pair_id": pair_id,
        "labels": len(written),
        "final_loss": fit.history[-1].total,
        "seconds": time.perf_counter() - t0,
    }


def _run_label_job(job):
    try:
        return label_pair(*job), None
    except (FormatError, InvalidArgument, OptimizationError, OSError, ValueError) as exc:
        return None, f"{job[0]}: {type(exc).__name__}: {exc}"


def cmd_label(args) -> int:
    cfg = load_config(args)
    pairs = resolve_pairs(args.inputs, args.pairs)
    if not pairs:
        print("error: no pairs resolved", file=sys.stderr)
        return EXIT_RUNTIME
    out_dir = args.out or cfg.labelgen.out_dir
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(pid, a, b, cfg.to_dict(), out_dir) for pid, a, b in pairs]
    t0 = time.perf_counter()
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(jobs))) as ex:
            results = list(ex.map(_run_label_job, jobs))
    else:
        results = [_run_label_job(j) for j in jobs]
    ok = [r for r, _ in results if r is not None]
    errors = [e for _, e in results if e is not None]
    for r in ok:
        print(f"{r['pair_id']}: {r['labels']} labels, loss {r['final_loss']:.5f}, {r['seconds']:.1f} s")
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    mean_loss = float(np.mean([r["final_loss"] for r in ok])) if ok else float("nan")
    print(
        f"pairs: {len(ok)}/{len(pairs)}  labels: {sum(r['labels'] for r in ok)}  "
        f"mean loss: {mean_loss:.5f}  wall: {time.perf_counter() - t0:.1f} s"
    )
    return EXIT_RUNTIME if errors else EXIT_OK


# -- eval ---------------------------------------------------------------------------


def _sfl_index(d: str) -> dict:
    if not os.path.isdir(d):
        raise UsageError(f"not a directory: {d}")
    out = {}
    for root, _, files in os.walk(d):
        for f in files:
            if f.endswith(".sfl"):
                out[os.path.relpath(os.path.join(root, f), d)[: -len(".sfl")]] = os.path.join(root, f)
    return out


def cmd_eval(args) -> int:
    pred, gt = _sfl_index(args.pred_dir), _sfl_index(args.gt_dir)
    common = sorted(set(pred) & set(gt))
    missing = sorted(set(pred) ^ set(gt))
    if missing:
        print(f"warning: skipping {len(missing)} unmatched id(s): {', '.join(missing)}", file=sys.stderr)
    if not common:
        print("error: no matching pair ids", file=sys.stderr)
        return EXIT_RUNTIME
    rows = []
    for pid in common:
        src_p, flow_p = read_sfl(pred[pid])
        src_g, flow_g = read_sfl(gt[pid])
        if src_p.shape != src_g.shape:
            print(f"warning: {pid}: point counts differ ({len(src_p)} vs {len(src_g)}), skipped", file=sys.stderr)
            continue
        rows.append((pid, compute_metrics(flow_p.astype(np.float64), flow_g.astype(np.float64))))
    if not rows:
        print("error: no comparable pairs", file=sys.stderr)
        return EXIT_RUNTIME
    mean = MetricsRecord(*np.mean([m.as_row() for _, m in rows], axis=0))
    print(f"{'pair':<32} {'epe3d':>9} {'acc3ds':>8} {'acc3dr':>8} {'outliers':>8}")
    for pid, m in rows + [("mean", mean)]:
        print(f"{pid:<32} {m.epe3d:9.5f} {m.acc3ds:8.4f} {m.acc3dr:8.4f} {m.outliers:8.4f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("pair_id",) + MetricsRecord.FIELDS)
            for pid, m in rows + [("mean", mean)]:
                w.writerow([pid] + [repr(float(v)) for v in m.as_row()])
    return EXIT_OK


# -- synth / bench --------------------------------------------------------------


def cmd_synth(args) -> int:
    specs = load_scene_specs(args.spec)
    os.makedirs(args.out, exist_ok=True)
    lines = []
    for spec in specs:
        scene = generate_synthetic_scene(spec)
        sid = spec.scene_id
        src_path = os.path.join(args.out, f"{sid}_src.bin")
        tgt_path = os.path.join(args.out, f"{sid}_tgt.bin")
        write_point_binary(src_path, scene.src)
        write_point_binary(tgt_path, PointCloud(scene.tgt.points, scene.tgt.intensity))
        write_sfl(os.path.join(args.out, f"{sid}_gt.sfl"), scene.src.points, scene.gt_flow)
        lines.append(f"{os.path.basename(src_path)} {os.path.basename(tgt_path)}")
    with open(os.path.join(args.out, "pairs.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {len(specs)} scene(s) to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args)
    specs = load_scene_specs(args.spec)
    agg, reports = evaluate_pipeline(specs, cfg, csv_path=args.out, workers=cfg.workers)
    print(",".join(CSV_HEADER))
    for r in reports:
        m = r.metrics
        print(f"{r.scene_id},{m.epe3d:.6f},{m.acc3ds:.4f},{m.acc3dr:.4f},{m.outliers:.4f},{r.runtime_ms:.0f}")
    m = agg["mean"]
    print(f"mean,{m.epe3d:.6f},{m.acc3ds:.4f},{m.acc3dr:.4f},{m.outliers:.4f},{agg['runtime_ms']:.0f}")
    print(f"report: {args.out}")
    return EXIT_OK


def cmd_print_default_config(args) -> int:
    json.dump(PipelineConfig().to_dict(), sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


COMMANDS = {
    "label": cmd_label,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "bench": cmd_bench,
    "print-default-config": cmd_print_default_config,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, InvalidArgument, OptimizationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
