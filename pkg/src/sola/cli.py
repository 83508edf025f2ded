"""Command line entry point.

Subcommands: generate-data, make-gt, train, evaluate, gradcam,
dump-filters. Failures print one JSON object to stderr and exit nonzero;
config values may be overridden via SOLA_<FIELD> environment variables.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import anomaly, gradcam, srm, supervision
from .data import BlendRecipe, generate_dataset, load_dataset, make_source_images
from .model import load_checkpoint
from .train import RunConfig, apply_env_overrides, evaluate, pack_samples, train


class JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": message}), file=sys.stderr)
        self.exit(2)


def _load_sources(args) -> list[np.ndarray]:
    if args.sources:
        paths = sorted(Path(args.sources).iterdir())
        images = []
        for p in paths:
            if p.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
                continue
            img = np.asarray(Image.open(p).convert("RGB"))
            if min(img.shape[:2]) < 256:
                raise ValueError(f"source image {p.name} is smaller than 256px")
            images.append(img)
        if len(images) < 2:
            raise ValueError(f"found {len(images)} usable images in {args.sources}; need at least 2")
        return images
    return make_source_images(args.n_sources, seed=args.source_seed)


def cmd_generate_data(args) -> int:
    recipe = BlendRecipe(
        family=args.family,
        donor=args.donor,
        blur_sigma=args.blur_sigma,
        area_range=(args.area_lo, args.area_hi),
        jitter_strength=args.jitter,
    )
    manifest = generate_dataset(
        _load_sources(args), recipe, args.n_real, args.n_fake, args.seed, args.out
    )
    print(json.dumps({"manifest": str(manifest), "n_real": args.n_real, "n_fake": args.n_fake}))
    return 0


def cmd_make_gt(args) -> int:
    raw = np.asarray(Image.open(args.mask).convert("L"))
    values = set(np.unique(raw))
    if not values <= {0, 255} and not values <= {0, 1}:
        raise ValueError(f"mask {args.mask} is not binary; found values {sorted(values)[:8]}")
    mask = (raw > 0).astype(np.uint8)
    gt = supervision.anomaly_ground_truth(mask, args.patch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for g in supervision.GROUPS:
        arrays[f"first_{g}"] = gt.first_order[g]
        arrays[f"second_{g}"] = gt.second_order[g]
        arrays[f"valid_first_{g}"] = gt.valid_first[g]
        arrays[f"valid_second_{g}"] = gt.valid_second[g]
    np.savez_compressed(out / "ground_truth.npz", **arrays)
    if args.previews:
        scale = args.patch
        for name in list(arrays):
            if name.startswith("valid"):
                continue
            img = np.kron(arrays[name] * 255, np.ones((scale, scale))).astype(np.uint8)
            Image.fromarray(img, mode="L").save(out / f"{name}.png")
    print(json.dumps({"ground_truth": str(out / "ground_truth.npz")}))
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config) if args.config else apply_env_overrides(RunConfig())
    overrides = {
        k: v
        for k, v in {
            "train_dir": args.train_dir,
            "eval_dir": args.eval_dir,
            "out_dir": args.out_dir,
            "epochs": args.epochs,
            "seed": args.seed,
            "mode": args.mode,
        }.items()
        if v is not None
    }
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    result = train(cfg)
    print(
        json.dumps(
            {
                "out_dir": str(result.out_dir),
                "best_checkpoint": str(result.best_checkpoint),
                "best_auc": result.best_auc,
                "seconds": round(result.seconds, 2),
            }
        )
    )
    return 0


def cmd_evaluate(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    report = evaluate(model, args.data, batch_size=args.batch)
    if args.out:
        Path(args.out).write_text(report.to_json())
    if args.export_maps:
        samples = []
        for s in load_dataset(args.data):
            samples.append(s)
            if len(samples) >= args.export_limit:
                break
        packed = pack_samples(samples)
        with torch.no_grad():
            maps, _ = model(packed.batch_images(torch.arange(len(packed))))
        for i, s in enumerate(samples):
            stem = Path(s.name).stem
            anomaly.export_map_images(maps, args.export_maps, prefix=stem, index=i)
    print(json.dumps({"auc": report.auc, "accuracy": report.accuracy, "n": len(report.scores)}))
    return 0


def cmd_gradcam(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    image = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0
    tensor = torch.from_numpy(image).permute(2, 0, 1)
    cam = gradcam.grad_cam(model, tensor, args.layer)
    overlay = gradcam.overlay_heatmap(image, cam)
    Image.fromarray(overlay).save(args.out)
    if args.cam_out:
        np.save(args.cam_out, cam)
    print(json.dumps({"overlay": str(args.out)}))
    return 0


def _dump_kernel_text(weights: np.ndarray) -> str:
    blocks = []
    for o in range(weights.shape[0]):
        for i in range(weights.shape[1]):
            rows = "\n".join(" ".join(f"{v:.6f}" for v in row) for row in weights[o, i])
            blocks.append(f"# kernel out={o} in={i}\n{rows}")
    return "\n\n".join(blocks) + "\n"


def _constraint_entries(weights: np.ndarray) -> list[dict]:
    entries = []
    for o in range(weights.shape[0]):
        for i in range(weights.shape[1]):
            center = float(weights[o, i, 2, 2])
            off_sum = float(weights[o, i].sum() - weights[o, i, 2, 2])
            entries.append(
                {
                    "out_channel": o,
                    "in_channel": i,
                    "center": center,
                    "off_center_sum": off_sum,
                    "satisfied": abs(center + 1) < 1e-6 and abs(off_sum - 1) < 1e-6,
                }
            )
    return entries


def cmd_dump_filters(args) -> int:
    run = Path(args.run)
    if run.is_file():
        model, _ = load_checkpoint(run)
        epochs = {"checkpoint": model.asrm.weight.detach().numpy()}
    else:
        filters_dir = run / "filters"
        if not filters_dir.is_dir():
            raise FileNotFoundError(
                f"{filters_dir} not found; train with save_filters=true "
                "(config field save_filters or SOLA_SAVE_FILTERS=1) to record per-epoch filters"
            )
        epochs = {
            p.stem: np.load(p) for p in sorted(filters_dir.glob("epoch_*.npy"))
        }
        if not epochs:
            raise FileNotFoundError(f"no epoch_*.npy files in {filters_dir}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.probe_image:
        probe = np.asarray(Image.open(args.probe_image).convert("RGB"), dtype=np.float32) / 255.0
    else:
        probe = make_source_images(1, seed=args.probe_seed, size=256)[0].astype(np.float32) / 255.0
    probe_t = torch.from_numpy(probe).permute(2, 0, 1)[None]

    report = {}
    for name, weights in epochs.items():
        (out / f"{name}.txt").write_text(_dump_kernel_text(weights))
        entries = _constraint_entries(weights)
        report[name] = {
            "satisfied": all(e["satisfied"] for e in entries),
            "kernels": entries,
        }
        with torch.no_grad():
            resp = torch.nn.functional.conv2d(probe_t, torch.from_numpy(weights), padding=2)
        for ch in range(resp.shape[1]):
            grid = resp[0, ch].numpy()
            span = grid.max() - grid.min()
            norm = (grid - grid.min()) / span if span > 0 else np.zeros_like(grid)
            img = (norm * 255).round().astype(np.uint8)
            Image.fromarray(img, mode="L").save(out / f"{name}_response_ch{ch}.png")
    (out / "constraint_report.json").write_text(json.dumps(report, indent=2))
    print(
        json.dumps(
            {
                "out_dir": str(out),
                "epochs": sorted(report),
                "all_satisfied": all(r["satisfied"] for r in report.values()),
            }
        )
    )
    return 0


def build_parser() -> JsonArgumentParser:
    parser = JsonArgumentParser(prog="sola", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", parents=[], help="write a synthetic blended-forgery dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--family", default="ellipse", choices=("ellipse", "rectangle", "polygon"))
    p.add_argument("--donor", default="color-jittered-self", choices=("other-image", "color-jittered-self"))
    p.add_argument("--blur-sigma", type=float, default=2.0)
    p.add_argument("--area-lo", type=float, default=0.05)
    p.add_argument("--area-hi", type=float, default=0.35)
    p.add_argument("--jitter", type=float, default=0.25)
    p.add_argument("--n-real", type=int, required=True)
    p.add_argument("--n-fake", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sources", help="folder of source images (default: procedural textures)")
    p.add_argument("--n-sources", type=int, default=8)
    p.add_argument("--source-seed", type=int, default=1)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("make-gt", help="derive anomaly ground truth grids from a mask image")
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--previews", action="store_true")
    p.set_defaults(func=cmd_make_gt)

    p = sub.add_parser("train", help="run a training job from a JSON config")
    p.add_argument("--config", help="JSON config file (RunConfig fields)")
    p.add_argument("--train-dir")
    p.add_argument("--eval-dir")
    p.add_argument("--out-dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("sup", "weakly-sup"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="frame-level AUC of a checkpoint over a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--out", help="write the full report JSON here")
    p.add_argument("--export-maps", help="directory for per-image anomaly map PNGs")
    p.add_argument("--export-limit", type=int, default=4)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcam", help="gradient-weighted activation heat map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cam-out", help="also save the raw [0,1] map as .npy")
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("dump-filters", help="per-epoch noise filter dumps and response images")
    p.add_argument("--run", required=True, help="training output directory or checkpoint file")
    p.add_argument("--out", required=True)
    p.add_argument("--probe-image")
    p.add_argument("--probe-seed", type=int, default=7)
    p.set_defaults(func=cmd_dump_filters)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface every failure as machine-readable JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
