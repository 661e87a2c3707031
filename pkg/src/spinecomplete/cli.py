"""Command line: ``spinecomplete <subcommand> [options]``.

Subcommands follow the pipeline stages::

    project      depth (+mask, +colour) PNG -> point cloud PLY
    label        spine cloud + meshes + pose -> labelled PLY
    train        manifest -> checkpoint + loss curve CSV
    infer        checkpoint + partial PLY -> completed PLY
    eval         predicted + GT PLY -> metric row CSV/JSON
    crossval     manifest -> per-fold report CSVs
    report       report CSVs -> aggregate JSON, merged CSV, correlation CSV
    make-fixture write the synthetic multi-specimen RGB-D dataset

Every subcommand accepts ``--config FILE``, repeated ``--set key=value``
overrides and ``--out-dir DIR``; outputs are written atomically together
with ``config.resolved.json``.  Failures exit with status 1 and print one
JSON line ``{"error": <category>, "message": ...}`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .config import load_config, resolved_snapshot
from .errors import SpineCompleteError

logger = logging.getLogger("spinecomplete")

SNAPSHOT_NAME = "config.resolved.json"


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file (a previous config.resolved.json works too)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, e.g. train.lr=3e-4 (repeatable)")
    p.add_argument("--out-dir", default=".", help="directory for outputs (created if missing)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spinecomplete", description="Point-cloud completion toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("project", help="unproject a depth frame to a PLY cloud")
    _common(p)
    p.add_argument("--depth", required=True, help="16-bit depth PNG (mm)")
    p.add_argument("--intrinsics", required=True, help="intrinsics JSON")
    p.add_argument("--mask", help="spine mask PNG (non-zero = keep)")
    p.add_argument("--color", help="8-bit RGB PNG")
    p.add_argument("--level-mask", help="integer level mask PNG; labels points by lookup")
    p.add_argument("--output", default="cloud.ply")
    p.add_argument("--ascii", action="store_true", help="write ASCII PLY")

    p = sub.add_parser("label", help="label a spine cloud by distance to posed meshes")
    _common(p)
    p.add_argument("--cloud", required=True)
    p.add_argument("--mesh", action="append", required=True, metavar="LEVEL=PATH")
    p.add_argument("--pose", required=True, help="CT-to-camera pose JSON")
    p.add_argument("--intrinsics", help="needed for labeling.method=mask")
    p.add_argument("--output", default="labeled.ply")
    p.add_argument("--ascii", action="store_true")

    p = sub.add_parser("train", help="train the completion model on a manifest")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--specimens", nargs="*", help="restrict training to these specimens")
    p.add_argument("--output", default="model.ckpt")

    p = sub.add_parser("infer", help="complete a partial cloud with a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="partial cloud PLY")
    p.add_argument("--output", default="completed.ply")
    p.add_argument("--seed", type=int, default=0, help="seed for resampling the input")
    p.add_argument("--ascii", action="store_true")

    p = sub.add_parser("eval", help="score a predicted cloud against GT")
    _common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--partial", help="input partial cloud for CD_top/CD_bottom and IoU_input (default: GT)")
    p.add_argument("--level", type=int, default=0)
    p.add_argument("--specimen", default="")
    p.add_argument("--output", default="metrics.csv")

    p = sub.add_parser("crossval", help="leave-one-specimen-out evaluation")
    _common(p)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("report", help="aggregate report CSVs")
    _common(p)
    p.add_argument("inputs", nargs="+", help="report CSV files")
    p.add_argument("--variables", nargs="*", help="correlation columns (default: specimen, level, metrics)")

    p = sub.add_parser("make-fixture", help="write the synthetic RGB-D fixture")
    _common(p)
    p.add_argument("--specimens", type=int, default=2)
    p.add_argument("--views", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    return parser


class _Outputs:
    """Collects output payloads; nothing touches disk until the command succeeds."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.files: dict[str, bytes] = {}

    def add(self, name: str, data):
        self.files[name] = data.encode("utf-8") if isinstance(data, str) else bytes(data)

    def commit(self, snapshot: dict) -> list[str]:
        from .io import atomic_write_bytes
        from .io.jsonio import dumps_json

        os.makedirs(self.out_dir, exist_ok=True)
        self.add(SNAPSHOT_NAME, dumps_json(snapshot))
        written = []
        for name in sorted(self.files):
            path = os.path.join(self.out_dir, name)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            atomic_write_bytes(path, self.files[name])
            written.append(path)
        return written


def _ply_bytes(cloud, ascii_: bool = False) -> bytes:
    from .io.ply import encode_ply

    return encode_ply(cloud.points, cloud.colors, cloud.labels, binary=not ascii_)


def cmd_project(args, cfg, out: _Outputs):
    from .geometry import BinaryMask, unproject
    from .io import read_color_png, read_depth_png, read_intrinsics, read_label_png
    from .pipeline import lookup_mask_labels

    intr = read_intrinsics(args.intrinsics)
    depth = read_depth_png(args.depth)
    mask = BinaryMask(read_label_png(args.mask)) if args.mask else None
    color = read_color_png(args.color) if args.color else None
    cloud = unproject(depth, intr, mask, color, cfg.geometry.depth_scale)
    if args.level_mask:
        levels = read_label_png(args.level_mask)
        if levels.shape != intr.shape:
            from .errors import DimensionMismatchError

            raise DimensionMismatchError(f"level mask {levels.shape} vs intrinsics {intr.shape}")
        cloud = cloud.with_labels(lookup_mask_labels(cloud, levels, intr))
    out.add(args.output, _ply_bytes(cloud, args.ascii))
    logger.info("projected %d points", len(cloud))


def _parse_meshes(specs):
    from .errors import InvalidInputError
    from .io import read_mesh

    meshes = []
    for spec in specs:
        if "=" not in spec:
            raise InvalidInputError(f"--mesh expects LEVEL=PATH, got {spec!r}")
        level, path = spec.split("=", 1)
        meshes.append(read_mesh(path, int(level)))
    return meshes


def cmd_label(args, cfg, out: _Outputs):
    from .errors import InvalidInputError
    from .io import read_intrinsics, read_point_cloud, read_pose
    from .pipeline import generate_gt_labels, generate_mask_labels

    cloud = read_point_cloud(args.cloud)
    meshes = _parse_meshes(args.mesh)
    pose = read_pose(args.pose)
    if cfg.labeling.method == "mask":
        if not args.intrinsics:
            raise InvalidInputError("labeling.method=mask needs --intrinsics")
        labeled = generate_mask_labels(cloud, meshes, pose, read_intrinsics(args.intrinsics))
    else:
        labeled = generate_gt_labels(cloud, meshes, pose, cfg.labeling.tau_bg)
    out.add(args.output, _ply_bytes(labeled, args.ascii))
    counts = np.bincount(labeled.labels, minlength=1)
    logger.info("label counts %s", {i: int(c) for i, c in enumerate(counts) if c})


def cmd_train(args, cfg, out: _Outputs):
    from .errors import EmptyCloudError
    from .model import CompletionModel, encode_checkpoint
    from .pipeline import build_samples, history_to_csv, load_manifest, stable_seed
    from .spatial import random_downsample
    from .train import train

    manifest = load_manifest(args.manifest)
    samples, stats = build_samples(manifest, cfg)
    keep = set(args.specimens) if args.specimens else None
    mcfg = cfg.model.build()
    pairs = [
        (random_downsample(s.gt_partial, mcfg.n_input, stable_seed(cfg.train.seed, "train", s.specimen, s.view, s.level)),
         s.complete)
        for s in samples
        if keep is None or s.specimen in keep
    ]
    if not pairs:
        raise EmptyCloudError("no training samples after filtering")
    model = CompletionModel(mcfg, cfg.model.seed)
    result = train(model, pairs, cfg.train.build())
    out.add(args.output, encode_checkpoint(model, extra={"steps": result.steps, "samples": len(pairs)}))
    out.add("loss.csv", history_to_csv(result.history))
    logger.info("trained %d steps on %d samples (%d skipped)", result.steps, len(pairs), len(stats.skipped))


def cmd_infer(args, cfg, out: _Outputs):
    from .io import read_point_cloud
    from .model import complete, load_checkpoint
    from .spatial import random_downsample

    model = load_checkpoint(args.checkpoint)
    partial = read_point_cloud(args.input)
    partial = random_downsample(partial, model.config.n_input, args.seed)
    out.add(args.output, _ply_bytes(complete(model, partial), args.ascii))


def cmd_eval(args, cfg, out: _Outputs):
    from .io import read_point_cloud
    from .io.jsonio import dumps_json
    from .pipeline import REPORT_COLUMNS, SampleRecord, evaluate_sample, rows_to_csv

    pred = read_point_cloud(args.pred)
    gt = read_point_cloud(args.gt)
    partial = read_point_cloud(args.partial) if args.partial else gt
    sample = SampleRecord(args.specimen, os.path.basename(args.pred), args.level, partial, partial, gt)
    row = evaluate_sample(pred, sample, cfg, cfg.pipeline.seed)
    row.update(fold="", specimen=args.specimen, view=sample.view)
    out.add(args.output, rows_to_csv([row]))
    out.add(os.path.splitext(args.output)[0] + ".json", dumps_json({c: row.get(c) for c in REPORT_COLUMNS}))


def cmd_crossval(args, cfg, out: _Outputs):
    from .pipeline import crossval, history_to_csv, load_manifest, rows_to_csv

    manifest = load_manifest(args.manifest)
    result = crossval(manifest, cfg)
    all_rows = []
    for held_out, fold in sorted(result["folds"].items()):
        out.add(f"fold_{held_out}.csv", rows_to_csv(fold["rows"]))
        if fold["history"]:
            out.add(f"fold_{held_out}_loss.csv", history_to_csv(fold["history"]))
        all_rows.extend(fold["rows"])
    out.add("report.csv", rows_to_csv(all_rows))
    skipped = "specimen,view,level,reason\n" + "".join(
        f"{s},{v},{lv},{reason}\n" for s, v, lv, reason in result["stats"].skipped
    )
    out.add("skipped.csv", skipped)
    logger.info("%d folds, %d rows, %d skipped", len(result["folds"]), len(all_rows), len(result["stats"].skipped))


def cmd_report(args, cfg, out: _Outputs):
    from .io.jsonio import dumps_json
    from .pipeline import METRIC_COLUMNS, aggregate, correlation_matrix, correlation_to_csv, read_report_csv, rows_to_csv

    rows = []
    for path in args.inputs:
        rows.extend(read_report_csv(path))
    rows.sort(key=lambda r: (str(r.get("specimen")), str(r.get("view")), r.get("level") or 0))
    out.add("report.csv", rows_to_csv(rows))
    out.add("aggregate.json", dumps_json(aggregate(rows)))
    variables = args.variables or ["specimen", "level"] + METRIC_COLUMNS
    corr = correlation_matrix(rows, variables)
    out.add("correlation.csv", correlation_to_csv(corr))


def cmd_make_fixture(args, cfg, out: _Outputs):
    from .synthetic import make_fixture

    path = make_fixture(args.out_dir, n_specimens=args.specimens, n_views=args.views, seed=args.seed)
    logger.info("fixture manifest at %s", path)


COMMANDS = {
    "project": cmd_project,
    "label": cmd_label,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "crossval": cmd_crossval,
    "report": cmd_report,
    "make-fixture": cmd_make_fixture,
}


def _error(category: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": category, "message": message}) + "\n")
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = load_config(args.config, args.overrides)
        out = _Outputs(args.out_dir)
        COMMANDS[args.command](args, cfg, out)
        invocation = {"command": args.command, "version": __version__}
        out.commit(resolved_snapshot(cfg, invocation))
    except SpineCompleteError as exc:
        return _error(exc.category, str(exc))
    except FileNotFoundError as exc:
        return _error("file-not-found", str(exc))
    except OSError as exc:
        return _error("io", str(exc))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
