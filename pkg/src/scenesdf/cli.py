"""Command-line interface: dataset generation, training, evaluation,
threshold sweeps, mesh export, and artifact inspection.

Every run directory receives a manifest (config hash, seed, content id over
the emitted files) so identical invocations are verifiable byte-for-byte.
Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import config as cfgmod
from . import inference, reporting, scenes, training
from .errors import ConfigError, DataError, NumericalAbort
from .model import FieldModel
from .sparse import load_spt


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, cfg=None, seed=None, skip=("manifest.txt",)):
    entries = []
    for root, _dirs, files in os.walk(out_dir):
        for name in sorted(files):
            rel = os.path.relpath(os.path.join(root, name), out_dir)
            if rel in skip:
                continue
            entries.append((rel, _sha256(os.path.join(root, name))))
    entries.sort()
    content = hashlib.sha256("".join(f"{n}:{h}\n" for n, h in entries).encode()).hexdigest()
    lines = []
    if cfg is not None:
        lines.append(f"config_hash = {cfgmod.config_hash(cfg)}")
    if seed is not None:
        lines.append(f"seed = {seed}")
    lines.append(f"content_id = {content}")
    for n, h in entries:
        lines.append(f"file {n} = {h}")
    tmp = os.path.join(out_dir, "manifest.txt.tmp")
    with open(tmp, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, os.path.join(out_dir, "manifest.txt"))


def load_dataset(data_dir):
    if not os.path.isdir(data_dir):
        raise DataError(f"{data_dir}: not a directory")
    dirs = sorted(d for d in os.listdir(data_dir) if d.startswith("scene_"))
    if not dirs:
        raise DataError(f"{data_dir}: contains no scene_* directories")
    return [scenes.load_scene_pair(os.path.join(data_dir, d)) for d in dirs]


def load_run(run_dir):
    cfg = cfgmod.load_config(path=os.path.join(run_dir, "config.txt"))
    params, _meta = ckpt.load_checkpoint(os.path.join(run_dir, "checkpoint.ckpt"))
    model = FieldModel(cfgmod.model_config(cfg), params)
    return cfg, model


def _config_from_args(args):
    return cfgmod.load_config(preset=args.preset, path=args.config, sets=args.set or [])


def cmd_gen_data(args):
    cfg = _config_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.scenes):
        pair = scenes.make_scene_pair(args.seed + i, tuple(cfg.grid_extent),
                                      n_beams=args.beams, n_azimuth=args.azimuth,
                                      occlusion=not args.no_occlusion)
        scenes.save_scene_pair(os.path.join(args.out, f"scene_{i:04d}"), pair)
    write_manifest(args.out, cfg=cfg, seed=args.seed)
    print(f"wrote {args.scenes} scenes to {args.out}")
    return 0


def cmd_train(args):
    cfg = _config_from_args(args)
    dataset = load_dataset(args.data)
    val_pair = None
    if args.val_data:
        val_pair = load_dataset(args.val_data)[0]
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.txt"), "w") as f:
        f.write(cfgmod.dump_config(cfg))
    result = training.train(dataset, cfg, val_pair=val_pair,
                            log=print if args.verbose else None,
                            out_dir=args.out)
    ckpt.save_checkpoint(os.path.join(args.out, "checkpoint.ckpt"),
                         result.model.params,
                         meta={"config_hash": cfgmod.config_hash(cfg)})
    rows = [[row[c] for c in training.METRIC_COLUMNS] for row in result.metrics]
    reporting.write_csv(os.path.join(args.out, "metrics.csv"),
                        training.METRIC_COLUMNS, rows)
    reporting.loss_curves_figure(result.metrics,
                                 os.path.join(args.out, "loss_curves.png"))
    write_manifest(args.out, cfg=cfg, seed=cfg.seed)
    print(f"trained {cfg.epochs} epochs; artifacts in {args.out}")
    return 0


def _auto_vth(cfg, model, pair):
    res = inference.query_field(model, pair.points, pair.gt.extent,
                                origin=pair.sensor_origin)
    vth, _rows = inference.best_threshold(res.sdf, pair.gt.occupancy_mask(),
                                          cfgmod.sweep_thresholds(cfg))
    return vth


def cmd_eval(args):
    cfg, model = load_run(args.run)
    dataset = load_dataset(args.data)
    out_dir = args.out or os.path.join(args.run, "eval")
    os.makedirs(out_dir, exist_ok=True)
    vth = args.vth if args.vth and args.vth > 0 else (
        cfg.v_th if cfg.v_th > 0 else _auto_vth(cfg, model, dataset[0]))
    want_sem = model.cfg.num_classes > 0
    rows = []
    per_class_sum = {}
    for i, pair in enumerate(dataset):
        res = inference.query_field(model, pair.points, pair.gt.extent,
                                    want_sem=want_sem, origin=pair.sensor_origin)
        mask = inference.select_surface(res.sdf, vth)
        gt_mask = pair.gt.occupancy_mask()
        iou = inference.compute_iou(mask, gt_mask)
        miou = ""
        if want_sem:
            pred_full = np.where(mask, res.sem_labels, 0)
            gt_full = np.zeros(len(gt_mask), dtype=np.int64)
            gt_full[gt_mask] = pair.gt.labels
            per_class, miou = inference.compute_miou(pred_full, gt_full,
                                                     model.cfg.num_classes)
            for c, v in per_class.items():
                per_class_sum[c] = per_class_sum.get(c, 0.0) + v
        tp = int(np.count_nonzero(mask & gt_mask))
        fp = int(np.count_nonzero(mask & ~gt_mask))
        fn = int(np.count_nonzero(~mask & gt_mask))
        rows.append([i, vth, iou, miou, tp, fp, fn])
    mean_iou = float(np.mean([r[2] for r in rows]))
    mean_row = ["mean", vth, mean_iou,
                float(np.mean([r[3] for r in rows])) if want_sem else "", "", "", ""]
    reporting.write_csv(os.path.join(out_dir, "metrics.csv"),
                        ("scene", "v_th", "IoU", "mIoU", "TP", "FP", "FN"),
                        rows + [mean_row])
    if want_sem and per_class_sum:
        per_class_mean = {c: v / len(dataset) for c, v in per_class_sum.items()}
        reporting.per_class_figure(per_class_mean, scenes.CLASS_NAMES,
                                   os.path.join(out_dir, "per_class_iou.png"))
    write_manifest(out_dir, cfg=cfg, seed=cfg.seed)
    print(f"mean IoU {mean_iou:.3f}% at v_th={vth:.5g}; report in {out_dir}")
    return 0


def cmd_sweep(args):
    cfg, model = load_run(args.run)
    dataset = load_dataset(args.data)
    pair = dataset[args.scene]
    out_dir = args.out or os.path.join(args.run, "sweep")
    os.makedirs(out_dir, exist_ok=True)
    thresholds = np.geomspace(args.lo, args.hi, args.steps)
    res = inference.query_field(model, pair.points, pair.gt.extent,
                                origin=pair.sensor_origin)
    rows = inference.threshold_sweep(res.sdf, pair.gt.occupancy_mask(), thresholds)
    reporting.write_csv(os.path.join(out_dir, "sweep.csv"),
                        ("v_th", "IoU", "n_pred"), rows)
    reporting.sweep_figure(rows, os.path.join(out_dir, "sweep.png"))
    write_manifest(out_dir, cfg=cfg, seed=cfg.seed)
    best = max(rows, key=lambda r: r[1])
    print(f"best v_th={best[0]:.5g} IoU={best[1]:.3f}%; report in {out_dir}")
    return 0


def cmd_mesh(args):
    cfg, model = load_run(args.run)
    dataset = load_dataset(args.data)
    pair = dataset[args.scene]
    resolution = tuple(int(v) for v in args.resolution.split(",")) \
        if "," in args.resolution else int(args.resolution)
    res = inference.query_field(model, pair.points, resolution,
                                origin=pair.sensor_origin)
    nv, nf = inference.export_mesh(args.out, res.sdf_grid(), iso=args.iso)
    print(f"wrote {args.out}: {nv} vertices, {nf} faces")
    return 0


def cmd_inspect(args):
    path = args.path
    if os.path.isdir(path):
        if os.path.exists(os.path.join(path, "meta.txt")):
            pair = scenes.load_scene_pair(path)
            print(f"scene seed={pair.seed}: {len(pair.points)} input points, "
                  f"{pair.gt.n} GT voxels, extent {pair.gt.extent}")
        else:
            names = sorted(d for d in os.listdir(path) if d.startswith("scene_"))
            print(f"dataset with {len(names)} scenes" if names else f"directory {path}")
        return 0
    if path.endswith(".spt"):
        st = load_spt(path)
        print(f"sparse tensor: n={st.n} m={st.m} extent={st.extent}")
        return 0
    if path.endswith(".ckpt"):
        params, meta = ckpt.load_checkpoint(path)
        total = sum(int(np.prod(v.shape)) for v in params.values())
        print(f"checkpoint: {len(params)} tensors, {total} parameters")
        for k, v in meta.items():
            print(f"  meta {k} = {v}")
        return 0
    if path.endswith(".txt"):
        cfg = cfgmod.load_config(path=path)
        print(cfgmod.dump_config(cfg), end="")
        return 0
    raise DataError(f"{path}: do not know how to inspect this")


def build_parser():
    p = argparse.ArgumentParser(prog="scenesdf",
                                description="Implicit scene completion from sparse point clouds")
    sub = p.add_subparsers(dest="command", required=True)

    def add_cfg(sp):
        sp.add_argument("--preset", default=None, choices=sorted(cfgmod.PRESETS))
        sp.add_argument("--config", default=None, help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a single config key")

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    add_cfg(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--scenes", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--beams", type=int, default=16)
    sp.add_argument("--azimuth", type=int, default=180)
    sp.add_argument("--no-occlusion", action="store_true")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train the hybrid model")
    add_cfg(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--val-data", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a trained run on a dataset")
    sp.add_argument("--run", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", default=None)
    sp.add_argument("--vth", type=float, default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="IoU versus selection threshold")
    sp.add_argument("--run", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--scene", type=int, default=0)
    sp.add_argument("--out", default=None)
    sp.add_argument("--lo", type=float, default=0.002)
    sp.add_argument("--hi", type=float, default=0.2)
    sp.add_argument("--steps", type=int, default=25)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("mesh", help="export a marching-cubes mesh")
    sp.add_argument("--run", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--scene", type=int, default=0)
    sp.add_argument("--resolution", default="64")
    sp.add_argument("--iso", type=float, default=0.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_mesh)

    sp = sub.add_parser("inspect", help="describe a dataset, dump, or checkpoint")
    sp.add_argument("path")
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        for k, v in exc.breakdown.items():
            print(f"  {k} = {v!r}", file=sys.stderr)
        return 4
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
