"""Command-line toolchain: foveate, train, rollout, evaluate, make-density.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import env, irl, metrics
from . import model as mdl
from .core import (ContainerError, Fixation, SchemaError, load_label_map,
                   load_trials, read_tensor_container, save_trials,
                   write_tensor_container)
from .foveation import RetinaParams, foveate_image, resolution_map, weight_maps


class UsageError(Exception):
    pass


def _parse_fixations(text: str) -> list[Fixation]:
    out = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        pieces = part.split(",")
        if len(pieces) != 2:
            raise UsageError(f"bad fixation '{part}': expected 'x,y'")
        try:
            out.append(Fixation(float(pieces[0]), float(pieces[1])))
        except ValueError:
            raise UsageError(f"bad fixation '{part}': expected numbers")
    if not out:
        raise UsageError("no fixations given")
    return out


def model_config_from_dict(d: dict) -> mdl.ModelConfig:
    fields = {f.name for f in dataclasses.fields(mdl.ModelConfig)}
    unknown = set(d) - fields
    if unknown:
        raise UsageError(f"unknown model config keys: {sorted(unknown)}")
    d = dict(d)
    for key in ("pyramid_channels", "tasks"):
        if key in d:
            d[key] = tuple(d[key])
    return mdl.ModelConfig(**d)


def model_config_to_dict(config: mdl.ModelConfig) -> dict:
    d = dataclasses.asdict(config)
    d["pyramid_channels"] = list(config.pyramid_channels)
    d["tasks"] = list(config.tasks)
    return d


def _pyramid_provider(args) -> env.PyramidProvider:
    if getattr(args, "pyramids", None):
        return env.FfmpPyramids(args.pyramids)
    if getattr(args, "images", None):
        return env.GaussianPyramids(args.images)
    raise UsageError("need --pyramids DIR or --images DIR")


def _load_model(args) -> tuple[dict, mdl.ModelConfig]:
    if not getattr(args, "model_config", None):
        raise UsageError("--model-config is required with --checkpoint")
    with open(args.model_config, "r") as fh:
        config = model_config_from_dict(json.load(fh))
    reference = mdl.init_model(config, seed=0)
    params, _ = mdl.load_checkpoint(args.checkpoint, reference)
    return params, config


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_foveate(args):
    from PIL import Image

    with Image.open(args.image) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    image = np.moveaxis(arr, 2, 0)
    fixations = _parse_fixations(args.fixations)
    params = RetinaParams(alpha=args.alpha, sigma=args.sigma, p=args.p)

    out = foveate_image(image, fixations, params)
    rgb = (np.moveaxis(out, 0, 2) * 255).round().astype(np.uint8)
    Image.fromarray(rgb).save(args.out_image)

    R = resolution_map(fixations, params, image.shape[1:])
    maps = weight_maps(R, params.sigma)
    tensors = {f"W{i + 1}": np.broadcast_to(np.asarray(w, dtype=np.float32),
                                            R.shape).copy()[None]
               for i, w in enumerate(maps)}
    write_tensor_container(args.out_weights, tensors)
    print(f"wrote {args.out_image} and {args.out_weights}")
    return 0


def _train_config_from_file(path, overrides) -> dict:
    with open(path, "r") as fh:
        raw = json.load(fh)
    for key, val in overrides.items():
        if val is not None:
            raw.setdefault("train", {})[key] = val
    return raw


def cmd_train(args):
    overrides = {"iterations": args.iterations, "seed": args.seed, "lr": args.lr}
    raw = _train_config_from_file(args.config, overrides)

    model_cfg = model_config_from_dict(raw.get("model", {}))
    train_fields = {f.name for f in dataclasses.fields(irl.TrainConfig)}
    bad = set(raw.get("train", {})) - train_fields
    if bad:
        raise UsageError(f"unknown train config keys: {sorted(bad)}")
    train_cfg = irl.TrainConfig(**raw.get("train", {}))

    params = mdl.init_model(model_cfg, seed=train_cfg.seed)
    if args.describe:
        print(json.dumps(mdl.describe(model_cfg, params), indent=1))
        return 0

    # referenced paths are validated before any work starts
    trials_path = raw.get("trials")
    if not trials_path or not os.path.exists(trials_path):
        raise UsageError(f"trials file not found: {trials_path}")
    trials = load_trials(trials_path)

    if raw.get("pyramids_dir"):
        provider = env.FfmpPyramids(raw["pyramids_dir"])
    elif raw.get("images_dir"):
        provider = env.GaussianPyramids(raw["images_dir"])
    else:
        raise UsageError("config needs 'pyramids_dir' or 'images_dir'")

    objects = None
    if raw.get("objects"):
        with open(raw["objects"], "r") as fh:
            table = json.load(fh)
        objects = {img: [(o["category"], tuple(o["bbox"])) for o in objs]
                   for img, objs in table.items()}

    os.makedirs(args.out_dir, exist_ok=True)
    effective = {"model": model_config_to_dict(model_cfg),
                 "train": dataclasses.asdict(train_cfg),
                 "trials": trials_path,
                 "pyramids_dir": raw.get("pyramids_dir"),
                 "images_dir": raw.get("images_dir"),
                 "objects": raw.get("objects")}
    with open(os.path.join(args.out_dir, "config.json"), "w") as fh:
        json.dump(effective, fh, indent=1)
    with open(os.path.join(args.out_dir, "model.json"), "w") as fh:
        json.dump(model_config_to_dict(model_cfg), fh, indent=1)

    irl.train(trials, provider, model_cfg, train_cfg, objects=objects,
              checkpoint_path=os.path.join(args.out_dir, "checkpoint.ffmw"),
              log_path=os.path.join(args.out_dir, "log.csv"),
              progress=(lambda row: print(
                  f"step {row['step']}: total {row['total']:.4f}", flush=True)
                  if args.verbose else None))
    print(f"wrote {args.out_dir}/checkpoint.ffmw and {args.out_dir}/log.csv")
    return 0


def cmd_rollout(args):
    params, config = _load_model(args)
    provider = _pyramid_provider(args)
    trials = load_trials(args.trials)
    preds = []
    for trial in trials:
        cap = args.max_new_present if trial.present else args.max_new_absent
        rc = env.RolloutConfig(mode=args.mode, max_new_fixations=cap,
                               tau=args.tau, seed=args.seed)
        pyramid = provider.get(trial.image_id)
        scanpath = env.rollout(params, trial, pyramid, config, rc)
        preds.append(dataclasses.replace(trial, scanpath=scanpath, subject=-1))
    save_trials(args.out, preds, predicted=True)
    print(f"wrote {len(preds)} predicted scanpaths to {args.out}")
    return 0


def _policy_predictor(params, config, provider, tau):
    def predictor(trial, prefix):
        pyramid = provider.get(trial.image_id)
        dmin = mdl.state_distance_map(list(prefix), config)
        outs, _ = mdl.forward_batch(params, [(pyramid, dmin, trial.task)], config)
        return irl.policy_dist(outs[0].q_values, tau)

    return predictor


def cmd_evaluate(args):
    preds = load_trials(args.pred)
    gts = load_trials(args.gt)

    label_maps = None
    if args.label_maps:
        label_maps = {}
        for t in gts:
            path = os.path.join(args.label_maps, f"{t.image_id}.png")
            if os.path.exists(path):
                label_maps[t.image_id] = load_label_map(path)
        if not label_maps:
            print("warning: no label maps found; semantic score skipped",
                  file=sys.stderr)
            label_maps = None

    predictor = None
    baseline = None
    if args.checkpoint:
        params, config = _load_model(args)
        provider = _pyramid_provider(args)
        predictor = _policy_predictor(params, config, provider, args.tau)
    if args.density:
        tensors = read_tensor_container(args.density)
        baseline = metrics.DensityBaseline(
            {name: arr for name, arr in tensors.items()})

    report = metrics.evaluate_predictions(preds, gts, label_maps=label_maps,
                                          predictor=predictor, baseline=baseline)
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "report.json"), "w") as fh:
        json.dump({"aggregates": report.aggregates, "trials": report.rows}, fh,
                  indent=1)
    import csv

    columns = sorted({k for row in report.rows for k in row})
    with open(os.path.join(args.out_dir, "report.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(report.rows)

    if args.plot_trials:
        _emit_plots(args, preds, gts, report, predictor)
    for name, value in report.aggregates.items():
        print(f"{name}: {value:.4f}")
    return 0


def _emit_plots(args, preds, gts, report, predictor):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pred_by_key = {(p.image_id, p.task): p for p in preds}
    done = set()
    for g in gts:
        key = (g.image_id, g.task)
        if key in done or key not in pred_by_key:
            continue
        done.add(key)
        if len(done) > args.plot_trials:
            break
        p = pred_by_key[key]
        fig, ax = plt.subplots(figsize=(8, 5))
        ax.set_xlim(0, 512)
        ax.set_ylim(320, 0)
        if args.images:
            path = os.path.join(args.images, f"{g.image_id}.png")
            if os.path.exists(path):
                from PIL import Image

                ax.imshow(Image.open(path), extent=(0, 512, 320, 0))
        for trial, color, label in ((g, "tab:blue", "human"),
                                    (p, "tab:red", "model")):
            xs = [f.x for f in trial.scanpath.fixations]
            ys = [f.y for f in trial.scanpath.fixations]
            ax.plot(xs, ys, "-o", color=color, label=label, alpha=0.8)
        ax.legend()
        ax.set_title(f"{g.image_id} / {g.task}")
        fig.savefig(os.path.join(args.out_dir,
                                 f"scanpath_{g.image_id}_{g.task}.svg"))
        plt.close(fig)

        if predictor is not None:
            probs = predictor(g, g.scanpath.fixations[:1]).reshape(20, 32)
            fig, ax = plt.subplots(figsize=(8, 5))
            ax.imshow(probs, cmap="viridis")
            ax.set_title(f"priority map: {g.image_id} / {g.task}")
            fig.savefig(os.path.join(args.out_dir,
                                     f"priority_{g.image_id}_{g.task}.png"))
            plt.close(fig)


def cmd_make_density(args):
    trials = load_trials(args.trials)
    train_trials = [t for t in trials if t.split == "train"]
    base = metrics.density_baseline(train_trials or trials,
                                    eps=args.eps, blur_sigma=args.blur)
    tensors = {task: m.astype(np.float32) for task, m in base.maps.items()}
    write_tensor_container(args.out, tensors)
    print(f"wrote {len(tensors)} density maps to {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fovsearch",
        description="Foveated feature maps, gaze policies, and scanpath metrics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("foveate", help="render a fixation-contingent image")
    p.add_argument("--image", required=True)
    p.add_argument("--fixations", required=True,
                   help="semicolon-separated x,y pairs, e.g. '256,160;100,80'")
    p.add_argument("--alpha", type=float, default=2.5)
    p.add_argument("--sigma", type=float, default=0.3)
    p.add_argument("--p", type=float, default=9.14,
                   help="pixels per degree at image resolution")
    p.add_argument("--out-image", required=True)
    p.add_argument("--out-weights", required=True)
    p.set_defaults(func=cmd_foveate)

    p = sub.add_parser("train", help="train the fixation policy")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--describe", action="store_true",
                   help="print the architecture summary and exit")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="predict scanpaths with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model-config", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--pyramids")
    p.add_argument("--images")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-new-absent", type=int, default=10)
    p.add_argument("--max-new-present", type=int, default=6)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--label-maps")
    p.add_argument("--density")
    p.add_argument("--checkpoint")
    p.add_argument("--model-config")
    p.add_argument("--pyramids")
    p.add_argument("--images")
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--plot-trials", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("make-density", help="build per-task fixation densities")
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--blur", type=float, default=1.0)
    p.set_defaults(func=cmd_make_density)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SchemaError, ContainerError, mdl.CheckpointError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except irl.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
