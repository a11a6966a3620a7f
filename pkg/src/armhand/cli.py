"""Operator command line: synth | train | eval | infer | ablate.

Every run resolves its configuration (defaults < profile < config file <
flags), executes, and writes exactly one run manifest recording the resolved
snapshot, seeds, input/output content hashes and timestamps. Errors print a
single machine-parseable line to stderr with the prefix ``armhand:error:``
and exit nonzero.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .datapipe import (
    Dataset,
    SynthConfig,
    dataset_windows,
    load_dataset,
    read_clip,
    write_clip,
    write_dataset,
    MotionClip,
    preprocess_keypoints,
)
from .evaluate import (
    default_matrix,
    evaluate_model,
    infer_rotations,
    render_ablation_table,
    run_ablation,
    write_ablation,
    write_report,
)
from .kinematics import Skeleton
from .model import ModelConfig, load_params, save_params
from .train import TrainConfig, load_train_state, train

DATA_DIR_ENV = "ARMHAND_DATA_DIR"
_ERROR_PREFIX = "armhand:error:"


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _hash_tree(paths) -> dict:
    return {str(p): _sha256(p) for p in paths if Path(p).is_file()}


def _write_manifest(out_dir, subcommand: str, config: dict, seed, inputs: dict,
                    outputs, started: float) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": "armhand-run/1",
        "version": __version__,
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": _hash_tree(outputs),
        "started_at": started,
        "finished_at": time.time(),
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def _load_layered(path) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config file must be a mapping")
    return doc


def _dataset_dir(args) -> Path:
    if getattr(args, "dataset", None):
        return Path(args.dataset)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    raise ValueError(
        f"no dataset directory: pass --dataset or set {DATA_DIR_ENV}")


# -- synth -------------------------------------------------------------------


def cmd_synth(args) -> int:
    started = time.time()
    doc = _load_layered(args.config)
    overrides = dict(doc.get("synth", doc))  # flat or nested config accepted
    for flag in ("sequences", "frames", "seed", "correlation", "fps"):
        val = getattr(args, flag)
        if val is not None:
            overrides[flag] = val
    if args.dropout is not None:
        overrides["detection_dropout"] = args.dropout
    if args.noise is not None:
        overrides["pixel_noise"] = args.noise
    config = SynthConfig(**overrides)
    skeleton = Skeleton.from_yaml(args.skeleton) if args.skeleton else Skeleton.default()
    out = Path(args.out)
    manifest = write_dataset(out, config, skeleton)
    files = [out / e["file"] for e in manifest["clips"]] + [out / "manifest.json"]
    _write_manifest(out, "synth", asdict(config), config.seed,
                    {"skeleton": skeleton.fingerprint()}, files, started)
    splits = [e["split"] for e in manifest["clips"]]
    print(f"wrote {len(manifest['clips'])} clips to {out} "
          f"({splits.count('train')} train / {splits.count('test')} test)")
    return 0


# -- train -------------------------------------------------------------------


def _resolve_train_configs(args):
    doc = _load_layered(args.config)
    model_over = dict(doc.get("model", {}))
    train_over = dict(doc.get("train", {}))
    if args.arch:
        model_over["arch"] = args.arch
    arch = model_over.pop("arch", "pahmt")
    if args.seed is not None:
        train_over["seed"] = args.seed
        model_over.setdefault("init_seed", args.seed)
    if args.epochs is not None:
        train_over["epochs"] = args.epochs
    if args.batch_size is not None:
        train_over["batch_size"] = args.batch_size
    if args.mode:
        train_over["input_mode"] = args.mode
    if args.checkpoint_every is not None:
        train_over["checkpoint_every"] = args.checkpoint_every
    if args.no_smooth:
        train_over["smooth_loss"] = False
    if args.no_fk:
        train_over["fk_loss"] = False
    if args.no_gan:
        train_over["gan_loss"] = False
    model_config = ModelConfig.defaults(arch, **model_over)
    train_config = TrainConfig.from_profile(args.profile, **train_over)
    return model_config, train_config


def cmd_train(args) -> int:
    started = time.time()
    data_dir = _dataset_dir(args)
    ds = load_dataset(data_dir)
    windows = dataset_windows(ds.train, ds.skeleton)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    state = None
    if args.resume:
        state, resumed_config = load_train_state(args.resume)
        model_config = state.gen.config
        train_config = resumed_config
    else:
        model_config, train_config = _resolve_train_configs(args)

    state = train(model_config, train_config, windows, ds.skeleton,
                  out_dir=out, state=state, max_steps=args.max_steps,
                  log_fn=(_progress_logger(train_config) if args.verbose else None))

    gen_path = out / "generator_final.ckpt"
    save_params(gen_path, state.gen, meta={
        "kind": "generator",
        "skeleton_fingerprint": ds.skeleton_fingerprint,
        "train_config": asdict(train_config),
        "epoch": state.epoch,
        "step": state.step,
    })
    outputs = [gen_path, out / "train_log.jsonl"] + sorted(out.glob("state_*.ckpt"))
    _write_manifest(out, "train",
                    {"model": model_config.to_dict(), "train": asdict(train_config)},
                    train_config.seed,
                    {"dataset": _sha256(data_dir / "manifest.json")},
                    outputs, started)
    final = state.history[-1] if state.history else {}
    print(f"trained {state.step} steps ({state.epoch} epochs); "
          f"final total loss {final.get('total', float('nan')):.6f}; "
          f"checkpoint {gen_path}")
    return 0


def _progress_logger(config: TrainConfig):
    def log(record):
        if record["step"] % 20 == 0:
            parts = " ".join(f"{k}={v:.4f}" for k, v in record.items()
                             if k not in ("step", "epoch") and isinstance(v, float))
            print(f"step {record['step']} epoch {record['epoch']} {parts}")
    return log


# -- eval --------------------------------------------------------------------


def cmd_eval(args) -> int:
    started = time.time()
    data_dir = _dataset_dir(args)
    ds = load_dataset(data_dir)
    params, meta = load_params(args.ckpt)
    ckpt_fp = meta.get("skeleton_fingerprint")
    if ckpt_fp is not None and ckpt_fp != ds.skeleton_fingerprint:
        raise ValueError(
            "checkpoint/dataset mismatch: the checkpoint was trained against "
            f"skeleton {ckpt_fp[:12]}... but the dataset uses "
            f"{ds.skeleton_fingerprint[:12]}...; refusing to evaluate")
    if not ds.test:
        raise ValueError(f"dataset at {data_dir} has no test split")
    input_mode = meta.get("train_config", {}).get("input_mode", args.mode or "ah2ah")
    report = evaluate_model(params, ds.test, ds.skeleton, input_mode=input_mode,
                            fingerprints={
                                "checkpoint": _sha256(args.ckpt),
                                "dataset": _sha256(data_dir / "manifest.json"),
                                "skeleton": ds.skeleton_fingerprint,
                            })
    out = Path(args.out)
    write_report(out, report)
    _write_manifest(out, "eval", {"ckpt": str(args.ckpt), "input_mode": input_mode},
                    None,
                    {"checkpoint": _sha256(args.ckpt),
                     "dataset": _sha256(data_dir / "manifest.json")},
                    [out / "eval.txt", out / "eval.jsonl"], started)
    print(report.headline())
    return 0


# -- infer -------------------------------------------------------------------


def cmd_infer(args) -> int:
    started = time.time()
    params, meta = load_params(args.ckpt)
    _, kclip = read_clip(args.input)
    input_mode = meta.get("train_config", {}).get("input_mode", "ah2ah")
    feats = preprocess_keypoints(kclip)
    rotations = infer_rotations(params, feats, input_mode)
    predicted = MotionClip(rotations, np.zeros((rotations.shape[0], 3)), kclip.fps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_clip(out, predicted, kclip)
    outputs = [out]
    if args.export_positions:
        skeleton = Skeleton.default()
        positions = predicted.local_positions(skeleton)
        pos_path = Path(args.export_positions)
        with open(pos_path, "w", encoding="utf-8") as fh:
            fh.write("frame,joint,x,y,z\n")
            for t in range(positions.shape[0]):
                for j in range(positions.shape[1]):
                    x, y, z = positions[t, j]
                    fh.write(f"{t},{skeleton.names[j]},{x!r},{y!r},{z!r}\n")
        outputs.append(pos_path)
    _write_manifest(out.parent, "infer", {"ckpt": str(args.ckpt)}, None,
                    {"checkpoint": _sha256(args.ckpt), "clip": _sha256(args.input)},
                    outputs, started)
    print(f"wrote {rotations.shape[0]} frames of rotations to {out}")
    return 0


# -- ablate ------------------------------------------------------------------


def cmd_ablate(args) -> int:
    started = time.time()
    if args.write_default:
        path = Path(args.write_default)
        path.write_text(yaml.safe_dump({"rows": default_matrix()}, sort_keys=False))
        print(f"wrote default ablation matrix to {path}")
        return 0
    data_dir = _dataset_dir(args)
    ds = load_dataset(data_dir)
    if args.matrix:
        doc = _load_layered(args.matrix)
        matrix = doc.get("rows", doc if isinstance(doc, list) else [])
    else:
        matrix = default_matrix()
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else (0, 1, 2)
    results = run_ablation(matrix, ds, seeds=seeds, max_steps=args.max_steps,
                           log_fn=print if args.verbose else None)
    out = Path(args.out)
    write_ablation(out, results)
    _write_manifest(out, "ablate",
                    {"matrix": matrix, "seeds": list(seeds)}, None,
                    {"dataset": _sha256(data_dir / "manifest.json")},
                    [out / "ablation.txt", out / "ablation.jsonl"], started)
    print(render_ablation_table(results))
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="armhand",
        description="Arm-hand rotation estimation: data synthesis, training, "
                    "evaluation, inference and ablation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--skeleton", help="skeleton YAML (default: built-in)")
    p.add_argument("--sequences", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--fps", type=float)
    p.add_argument("--correlation", type=float)
    p.add_argument("--dropout", type=float, help="detection dropout rate")
    p.add_argument("--noise", type=float, help="pixel noise sigma")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a generator")
    p.add_argument("--dataset", help=f"dataset dir (default ${DATA_DIR_ENV})")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="YAML with model:/train: sections")
    p.add_argument("--profile", default="desk", choices=["desk", "paper"])
    p.add_argument("--arch", choices=["cnn", "ahmt", "pahmt"])
    p.add_argument("--mode", choices=["ah2ah", "h2h"])
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--no-smooth", action="store_true", help="disable the smooth loss")
    p.add_argument("--no-fk", action="store_true", help="disable the FK loss")
    p.add_argument("--no-gan", action="store_true", help="disable the GAN loss")
    p.add_argument("--resume", help="training-state checkpoint to continue")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["ah2ah", "h2h"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict rotations for a keypoint clip")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="clip file (.ahc)")
    p.add_argument("--out", required=True, help="output clip file")
    p.add_argument("--export-positions", help="also write FK positions as CSV")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="run an ablation matrix")
    p.add_argument("--dataset")
    p.add_argument("--out", default="ablation")
    p.add_argument("--matrix", help="YAML/JSON matrix file (default: built-in rows)")
    p.add_argument("--seeds", help="comma-separated seeds (default 0,1,2)")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--write-default", metavar="PATH",
                   help="write the default matrix to PATH and exit")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point per contract
        print(f"{_ERROR_PREFIX} {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
