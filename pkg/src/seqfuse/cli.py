"""Experiment orchestration commands.

Subcommands: generate, train, eval, assay, saliency-report, visualize.
Every command is deterministic given its config and seed; reports are JSON
with sorted keys so reruns are byte-identical.  Exit codes: 0 success,
2 config error, 3 runtime failure.
"""

import argparse
import dataclasses
import itertools
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import CANONICAL_SEQUENCES, detect, fusenet, phantom, saliency, trainer
from .config import ConfigError, ExperimentConfig, load_config, save_config, validate_censor
from .preprocess import preprocess_volume
from .fusenet import FusionConfig, build_model, load_checkpoint, save_checkpoint


def _split_ids(splits):
    return {
        split: [f"{split}{i:03d}" for i in range(n)]
        for split, n in splits.items()
    }


def cmd_generate(cfg: ExperimentConfig, seed=None, out=None):
    """Write train/val/test phantom datasets under the dataset root."""
    spec = cfg.dataset.phantom
    if seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
    root = Path(out) if out else Path(cfg.dataset.root)
    ids = _split_ids(cfg.dataset.splits)
    for split, pids in ids.items():
        volumes = [phantom.generate_phantom(spec, pid) for pid in pids]
        manifest = phantom.write_dataset(volumes, root / split, overwrite=True)
        n_seq = len(spec.sequence_profiles)
        print(f"{split}: {len(volumes)} patients x {n_seq} sequences -> {manifest}")
    return 0


def _prepared_volumes(cfg, split, sequence_filter=None):
    volumes = phantom.read_dataset(Path(cfg.dataset.root) / split,
                                   sequence_filter=sequence_filter)
    return [preprocess_volume(v, tiles=cfg.preprocess.tiles, out_hw=cfg.preprocess.resize,
                              clip_limit=cfg.preprocess.clip_limit)
            for v in volumes]


def _sequence_order(cfg):
    manifest = phantom.read_manifest(Path(cfg.dataset.root) / "train")
    return tuple(manifest["canonical_sequences"])


def grid_configs(base: FusionConfig, dropout: bool, pair=(1, 2)):
    """The architecture grid: input, mid/end x three sharing modes, plus the
    pre/post subtraction variant (which is never trained with dropout)."""
    combos = [("input", None, "concat", None)]
    for integ, op in (("mid", "concat"), ("end", "mean")):
        for sharing in ("shared", "independent", "l2_tied"):
            combos.append((integ, sharing, op, None))
    if not dropout:
        combos.append(("mid", "shared", "subtract_pair", tuple(pair)))
    out = {}
    for integ, sharing, op, pr in combos:
        name = integ if sharing is None else f"{integ}_{sharing}"
        if op == "subtract_pair":
            name = "mid_subtract"
        out[name] = FusionConfig(
            integration=integ, sharing=sharing, fusion_op=op, pair=pr,
            n_seq=base.n_seq, n_slices=base.n_slices, tie_lambda=base.tie_lambda,
            backbone=base.backbone).validate()
    return out


def _train_one(cfg: ExperimentConfig, model_cfg: FusionConfig, run_dir: Path, seed):
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = run_dir / "best.pt"
    if ckpt.exists():
        print(f"{run_dir.name}: checkpoint exists, skipping (resume-safe no-op)")
        return 0
    order = _sequence_order(cfg)
    train_vols = _prepared_volumes(cfg, "train")
    val_vols = _prepared_volumes(cfg, "val")
    tc = cfg.train
    tc.seed = seed
    model = build_model(model_cfg, seed=seed)
    state = trainer.train(model, train_vols, val_vols, tc, sequence_order=order,
                          log_path=run_dir / "train_log.csv")
    save_checkpoint(model, ckpt, extra={"dropout_trained": tc.dropout is not None})
    saliency.write_csv(state.ledger, run_dir / "saliency.csv")
    summary = {
        "best_iteration": state.best_iteration,
        "best_val_map": state.best_score,
        "iterations": state.iteration,
        "model": model_cfg.to_dict(),
        "seed": seed,
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{run_dir.name}: best val mAP {state.best_score:.3f} "
          f"at iteration {state.best_iteration} -> {ckpt}")
    return 0


def _train_worker(args):
    cfg_doc, model_doc, run_dir, seed = args
    cfg = ExperimentConfig.from_dict(cfg_doc)
    return _train_one(cfg, FusionConfig.from_dict(model_doc), Path(run_dir), seed)


def cmd_train(cfg: ExperimentConfig, seed=None, out=None, grid=False, workers=1):
    seed = cfg.train.seed if seed is None else seed
    out_dir = Path(out) if out else Path(cfg.out_dir)
    dropout = cfg.train.dropout is not None
    if not grid:
        name = "model" if cfg.model.sharing is None else f"model_{cfg.model.sharing}"
        return _train_one(cfg, cfg.model, out_dir / name, seed)

    configs = grid_configs(cfg.model, dropout)
    suffix = "_dropout" if dropout else ""
    jobs = [(cfg.to_dict(), mc.to_dict(), str(out_dir / f"{name}{suffix}"), seed)
            for name, mc in configs.items()]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_train_worker, jobs))
    else:
        for job in jobs:
            _train_worker(job)
    print(f"grid complete: {len(jobs)} configurations under {out_dir}")
    return 0


def _evaluate(cfg, model, censor, split="test"):
    order = _sequence_order(cfg)
    vols = _prepared_volumes(cfg, split)
    upweight = getattr(model, "extra", {}).get("dropout_trained", True)
    per_patient = {}
    for vol in vols:
        prob = trainer.infer_volume(model, vol, order, censor=censor,
                                    n_slices=model.config.n_slices, upweight=upweight)
        gt = vol.gt_mask if vol.gt_mask is not None else np.zeros(prob.shape, dtype=bool)
        per_patient[vol.patient_id] = detect.evaluate_volume(prob, gt, vol.spacing_mm)
    reports = [per_patient[v.patient_id] for v in vols]
    pooled = detect.pooled_report(reports)
    ci = None
    if len(reports) >= 2 and cfg.eval.bootstrap_resamples > 0:
        ci = detect.bootstrap_ci(reports, n_resamples=cfg.eval.bootstrap_resamples,
                                 seed=cfg.eval.bootstrap_seed)
    return per_patient, pooled, ci


def cmd_eval(cfg: ExperimentConfig, checkpoint, censor=(), out=None):
    censor = validate_censor(censor) if censor else ()
    model = load_checkpoint(checkpoint)
    per_patient, pooled, ci = _evaluate(cfg, model, censor)
    text = detect.report_to_json(per_patient, pooled, ci,
                                 extra={"censor": sorted(censor)})
    out_dir = Path(out) if out else Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = "full" if not censor else "censor_" + "_".join(sorted(censor))
    path = out_dir / f"eval_{tag}.json"
    path.write_text(text)
    sens = "n/a" if pooled.max_sensitivity is None else f"{pooled.max_sensitivity:.3f}"
    print(f"censor={sorted(censor) or 'none'}: mAP {pooled.map_score:.3f}, "
          f"max sensitivity {sens} -> {path}")
    return 0


def cmd_assay(cfg: ExperimentConfig, checkpoint, out=None):
    """Evaluate every non-empty sequence subset; rows using all sequences or
    leaving exactly one out are highlighted."""
    model = load_checkpoint(checkpoint)
    order = _sequence_order(cfg)
    rows = []
    for r in range(len(order), 0, -1):
        for subset in itertools.combinations(order, r):
            censor = tuple(s for s in order if s not in subset)
            _, pooled, _ = _evaluate(cfg, model, censor)
            rows.append({
                "available": list(subset),
                "censored": list(censor),
                "n_available": len(subset),
                "upweight_scale": len(order) / len(subset),
                "map": pooled.map_score,
                "max_sensitivity": pooled.max_sensitivity,
                "tp_dice_mean": pooled.tp_dice_mean,
                "highlight": len(censor) <= 1,
            })
    rows.sort(key=lambda r: -r["map"])
    out_dir = Path(out) if out else Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "assay.json"
    path.write_text(json.dumps({"rows": rows}, indent=2, sort_keys=True) + "\n")
    for r in rows:
        mark = "*" if r["highlight"] else " "
        print(f"{mark} mAP {r['map']:.3f}  available: {', '.join(r['available'])}")
    print(f"{len(rows)} subsets -> {path}")
    return 0


def cmd_saliency_report(run_dir, out=None):
    run_dir = Path(run_dir)
    csv_path = run_dir / "saliency.csv"
    if not csv_path.exists():
        raise ConfigError(f"no saliency.csv under {run_dir}")
    ledger = saliency.read_csv(csv_path)
    paths = saliency.plot_ledger(ledger, Path(out) if out else run_dir)
    print(f"saliency plots: {paths['by_sequence']}, {paths['by_offset']}")
    return 0


def _contour(mask):
    from scipy import ndimage
    return mask & ~ndimage.binary_erosion(mask, np.ones((3, 3), dtype=bool))


def cmd_visualize(cfg: ExperimentConfig, checkpoint, patient, z_range=None, out=None,
                  split="test"):
    """Overlay images: ground truth contour green, prediction contour magenta,
    contour overlap white."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    model = load_checkpoint(checkpoint)
    order = _sequence_order(cfg)
    vols = [v for v in _prepared_volumes(cfg, split) if v.patient_id == patient]
    if not vols:
        raise ConfigError(f"patient {patient!r} not found in split {split!r}")
    vol = vols[0]
    prob = trainer.infer_volume(model, vol, order, n_slices=model.config.n_slices)
    pred = prob > detect.BASE_THRESHOLD

    depth = vol.grid_shape[0]
    zs = range(depth) if z_range is None else range(max(0, z_range[0]),
                                                    min(depth, z_range[1] + 1))
    background_seq = next((s for s in order if s in vol.sequences), None)
    out_dir = Path(out) if out else Path(cfg.out_dir) / "overlays"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for z in zs:
        base = vol.sequences[background_seq][z]
        rgb = np.stack([base, base, base], axis=-1).astype(np.float32)
        pc = _contour(pred[z])
        gc = (_contour(vol.gt_mask[z]) if vol.gt_mask is not None
              else np.zeros_like(pc))
        rgb[gc] = (0.0, 1.0, 0.0)
        rgb[pc] = (1.0, 0.0, 1.0)
        rgb[gc & pc] = (1.0, 1.0, 1.0)
        path = out_dir / f"{patient}_z{z:03d}.png"
        plt.imsave(path, np.clip(rgb, 0, 1))
        written.append(path)
    print(f"{len(written)} overlays -> {out_dir}")
    return 0


def _parse_z_range(text):
    lo, _, hi = text.partition(":")
    return int(lo), int(hi if hi else lo)


def build_parser():
    p = argparse.ArgumentParser(prog="seqfuse",
                                description="multi-sequence fusion experiments on phantoms")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="experiment config JSON")
        sp.add_argument("--out", default=None, help="output directory override")

    sp = sub.add_parser("generate", help="write phantom train/val/test datasets")
    common(sp)
    sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("train", help="train one model or the architecture grid")
    common(sp)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--grid", action="store_true", help="train all valid combinations")
    sp.add_argument("--workers", type=int, default=1)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--censor", default="", help="comma-separated sequences to withhold")

    sp = sub.add_parser("assay", help="evaluate every non-empty sequence subset")
    common(sp)
    sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("saliency-report", help="plot a training run's saliency ledger")
    sp.add_argument("--run", required=True, help="training run directory")
    sp.add_argument("--out", default=None)

    sp = sub.add_parser("visualize", help="write GT/prediction contour overlays")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--patient", required=True)
    sp.add_argument("--z", default=None, help="z range LO:HI (inclusive)")
    sp.add_argument("--split", default="test")

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "saliency-report":
            return cmd_saliency_report(args.run, out=args.out)
        cfg = load_config(args.config)
        if args.command == "generate":
            return cmd_generate(cfg, seed=args.seed, out=args.out)
        if args.command == "train":
            return cmd_train(cfg, seed=args.seed, out=args.out, grid=args.grid,
                             workers=args.workers)
        if args.command == "eval":
            censor = tuple(s for s in args.censor.split(",") if s)
            return cmd_eval(cfg, args.checkpoint, censor=censor, out=args.out)
        if args.command == "assay":
            return cmd_assay(cfg, args.checkpoint, out=args.out)
        if args.command == "visualize":
            z_range = _parse_z_range(args.z) if args.z else None
            return cmd_visualize(cfg, args.checkpoint, args.patient,
                                 z_range=z_range, out=args.out)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, fusenet.ConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
