"""Position/rotation error metrics and the ablation harness.

MPJPE is computed on FK joint positions in the skeleton-local frame (root at
the origin); MPJRE is the mean absolute axis-angle component difference, with
a geodesic-angle variant reported alongside since the two diverge for
rotations near a half turn. The ablation harness trains a row matrix of
{architecture x loss toggles x input mode} configurations over several seeds
and reports per-row medians in a table mirroring the standard layout.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datapipe import Dataset, dataset_windows, preprocess_keypoints
from .kinematics import Skeleton, forward_kinematics, rotation_geodesic_angle
from .model import ModelConfig, ModelParams, generator_forward, load_params
from .tensor import no_grad
from .train import TrainConfig, train


class MetricError(ValueError):
    """A metric was invoked with an unusable joint subset."""


# -- metrics -------------------------------------------------------------------


def _subset(indices, skeleton: Skeleton):
    if indices is None:
        return np.arange(skeleton.joint_count)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise MetricError("joint subset is empty")
    return idx


def mpjpe(pred_rotations, target_rotations, skeleton: Skeleton,
          joint_subset=None) -> float:
    """Mean per-joint position error (meters) over frames and the subset."""
    idx = _subset(joint_subset, skeleton)
    pos_p = forward_kinematics(skeleton, np.asarray(pred_rotations))
    pos_t = forward_kinematics(skeleton, np.asarray(target_rotations))
    d = pos_p[..., idx, :] - pos_t[..., idx, :]
    return float(np.sqrt((d * d).sum(axis=-1)).mean())


def mpjre(pred_rotations, target_rotations, joint_subset=None) -> float:
    """Mean absolute axis-angle component difference (radians)."""
    pred = np.asarray(pred_rotations)
    target = np.asarray(target_rotations)
    if pred.shape != target.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {target.shape}")
    if joint_subset is not None:
        idx = np.asarray(joint_subset, dtype=np.int64)
        if idx.size == 0:
            raise MetricError("joint subset is empty")
        pred = pred[..., idx, :]
        target = target[..., idx, :]
    return float(np.abs(pred - target).mean())


def mpjre_geodesic(pred_rotations, target_rotations, joint_subset=None) -> float:
    """Mean relative-rotation angle (radians); antipode-safe variant."""
    pred = np.asarray(pred_rotations)
    target = np.asarray(target_rotations)
    if joint_subset is not None:
        idx = np.asarray(joint_subset, dtype=np.int64)
        if idx.size == 0:
            raise MetricError("joint subset is empty")
        pred = pred[..., idx, :]
        target = target[..., idx, :]
    return float(rotation_geodesic_angle(pred, target).mean())


# -- whole-clip inference ----------------------------------------------------------


def stitch_starts(frame_count: int, window: int) -> list[int]:
    """Disjoint windows at stride f, plus a right-aligned final window."""
    if frame_count < window:
        raise MetricError(f"clip of {frame_count} frames is shorter than one "
                          f"window ({window})")
    starts = list(range(0, frame_count - window + 1, window))
    if starts[-1] != frame_count - window:
        starts.append(frame_count - window)
    return starts


def infer_rotations(params: ModelParams, features: np.ndarray,
                    input_mode: str = "ah2ah") -> np.ndarray:
    """Predict (T, 48, 3) rotations for a preprocessed clip.

    Overlapping frames (only where the right-aligned final window overlaps
    the grid) are averaged per frame.
    """
    f = params.config.window
    feats = np.array(features, dtype=np.float64, copy=True)
    if input_mode == "h2h":
        feats[:, :4, :] = 0.0
    t = feats.shape[0]
    starts = stitch_starts(t, f)
    batch = np.stack([feats[s:s + f] for s in starts])
    with no_grad():
        pred = generator_forward(batch, params).data
    out = np.zeros((t, params.config.out_joints, 3))
    count = np.zeros(t)
    for w, s in enumerate(starts):
        out[s:s + f] += pred[w]
        count[s:s + f] += 1.0
    return out / count[:, None, None]


# -- reports -------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Headline metrics plus the per-clip breakdown."""

    mpjpe_overall: float | None
    mpjpe_hands: float
    mpjre_arms: float | None
    mpjre_arms_geodesic: float | None
    input_mode: str = "ah2ah"
    clip_count: int = 0
    frame_count: int = 0
    per_clip: list = field(default_factory=list)
    fingerprints: dict = field(default_factory=dict)

    def headline(self) -> str:
        def fmt(v):
            return "-" if v is None else f"{v:.4f}"
        return (f"MPJPE(hands) {fmt(self.mpjpe_hands)}  "
                f"MPJPE(overall) {fmt(self.mpjpe_overall)}  "
                f"MPJRE(arms) {fmt(self.mpjre_arms)}")

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_model(params: ModelParams, pairs, skeleton: Skeleton,
                   input_mode: str = "ah2ah", fingerprints: dict | None = None) -> EvalReport:
    """Stitched-inference evaluation of a generator over (motion, keypoint) clips."""
    if not pairs:
        raise MetricError("no clips to evaluate")
    hands = skeleton.hand_joint_indices
    arms = skeleton.arm_joint_indices
    per_clip = []
    sums = {"hands": 0.0, "overall": 0.0, "arms": 0.0, "arms_geo": 0.0}
    total_frames = 0
    for i, (mclip, kclip) in enumerate(pairs):
        feats = preprocess_keypoints(kclip)
        pred = infer_rotations(params, feats, input_mode)
        target = mclip.rotations
        row = {
            "clip": i,
            "frames": mclip.frame_count,
            "mpjpe_hands": mpjpe(pred, target, skeleton, hands),
        }
        if input_mode == "ah2ah":
            row["mpjpe_overall"] = mpjpe(pred, target, skeleton)
            row["mpjre_arms"] = mpjre(pred, target, arms)
            row["mpjre_arms_geodesic"] = mpjre_geodesic(pred, target, arms)
        per_clip.append(row)
        w = mclip.frame_count
        total_frames += w
        sums["hands"] += row["mpjpe_hands"] * w
        if input_mode == "ah2ah":
            sums["overall"] += row["mpjpe_overall"] * w
            sums["arms"] += row["mpjre_arms"] * w
            sums["arms_geo"] += row["mpjre_arms_geodesic"] * w
    full = input_mode == "ah2ah"
    return EvalReport(
        mpjpe_overall=sums["overall"] / total_frames if full else None,
        mpjpe_hands=sums["hands"] / total_frames,
        mpjre_arms=sums["arms"] / total_frames if full else None,
        mpjre_arms_geodesic=sums["arms_geo"] / total_frames if full else None,
        input_mode=input_mode,
        clip_count=len(pairs),
        frame_count=total_frames,
        per_clip=per_clip,
        fingerprints=fingerprints or {})


def write_report(out_dir, report: EvalReport, name: str = "eval") -> None:
    """Persist both forms: human-readable table and line-delimited records."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{name}.jsonl", "w", encoding="utf-8") as fh:
        head = {k: v for k, v in report.to_dict().items() if k != "per_clip"}
        fh.write(json.dumps({"record": "summary", **head}) + "\n")
        for row in report.per_clip:
            fh.write(json.dumps({"record": "clip", **row}) + "\n")
    lines = [report.headline(), ""]
    lines.append(f"{'clip':>6} {'frames':>7} {'hands':>9} {'overall':>9} {'arms':>9}")
    for row in report.per_clip:
        lines.append(
            f"{row['clip']:>6} {row['frames']:>7} {row['mpjpe_hands']:>9.4f} "
            f"{row.get('mpjpe_overall', float('nan')):>9.4f} "
            f"{row.get('mpjre_arms', float('nan')):>9.4f}")
    (out / f"{name}.txt").write_text("\n".join(lines) + "\n")


# -- ablation harness ----------------------------------------------------------------


def default_matrix() -> list[dict]:
    """The seven standard rows: CNN ladder, then the transformer pair."""
    return [
        {"name": "cnn-h2h", "arch": "cnn", "mode": "h2h",
         "smooth": False, "fk": False, "gan": True},
        {"name": "cnn", "arch": "cnn", "mode": "ah2ah",
         "smooth": False, "fk": False, "gan": True},
        {"name": "cnn+smooth", "arch": "cnn", "mode": "ah2ah",
         "smooth": True, "fk": False, "gan": True},
        {"name": "cnn+fk", "arch": "cnn", "mode": "ah2ah",
         "smooth": False, "fk": True, "gan": True},
        {"name": "cnn+smooth+fk", "arch": "cnn", "mode": "ah2ah",
         "smooth": True, "fk": True, "gan": True},
        {"name": "ahmt+smooth+fk", "arch": "ahmt", "mode": "ah2ah",
         "smooth": True, "fk": True, "gan": True},
        {"name": "pahmt+smooth+fk", "arch": "pahmt", "mode": "ah2ah",
         "smooth": True, "fk": True, "gan": True},
    ]


def _row_configs(row: dict, seed: int):
    model_over = dict(row.get("model", {}))
    model_over.setdefault("init_seed", seed)
    model_config = ModelConfig.defaults(row["arch"], **model_over)
    train_over = dict(row.get("train", {}))
    profile = train_over.pop("profile", "desk")
    train_config = TrainConfig.from_profile(
        profile,
        seed=seed,
        smooth_loss=bool(row.get("smooth", False)),
        fk_loss=bool(row.get("fk", False)),
        gan_loss=bool(row.get("gan", True)),
        input_mode=row.get("mode", "ah2ah"),
        **train_over)
    return model_config, train_config


def run_ablation(matrix: list[dict], dataset: Dataset, seeds=(0, 1, 2),
                 max_steps: int | None = None, log_fn=None) -> list[dict]:
    """Train and evaluate every matrix row across seeds; medians per row.

    Rows may instead name a `checkpoint` to evaluate directly; a missing file
    marks the row unavailable without stopping the run.
    """
    skeleton = dataset.skeleton
    train_windows = dataset_windows(dataset.train, skeleton)
    results = []
    for row in matrix:
        entry = {"row": dict(row), "seeds": [], "available": True}
        if "checkpoint" in row:
            try:
                params, meta = load_params(row["checkpoint"])
            except (OSError, ValueError):
                entry["available"] = False
                results.append(entry)
                if log_fn:
                    log_fn(f"row {row.get('name', '?')}: checkpoint unavailable")
                continue
            report = evaluate_model(params, dataset.test, skeleton,
                                    input_mode=row.get("mode", "ah2ah"))
            entry["seeds"].append({"seed": None, **_metric_triplet(report)})
        else:
            for seed in row.get("seeds", seeds):
                model_config, train_config = _row_configs(row, seed)
                state = train(model_config, train_config, train_windows, skeleton,
                              max_steps=max_steps)
                report = evaluate_model(state.gen, dataset.test, skeleton,
                                        input_mode=train_config.input_mode)
                entry["seeds"].append({"seed": seed, **_metric_triplet(report)})
                if log_fn:
                    log_fn(f"row {row.get('name', '?')} seed {seed}: "
                           f"{report.headline()}")
        entry["median"] = _median_metrics(entry["seeds"])
        results.append(entry)
    return results


def _metric_triplet(report: EvalReport) -> dict:
    return {"mpjpe_hands": report.mpjpe_hands,
            "mpjpe_overall": report.mpjpe_overall,
            "mpjre_arms": report.mpjre_arms}


def _median_metrics(rows: list[dict]) -> dict:
    out = {}
    for key in ("mpjpe_hands", "mpjpe_overall", "mpjre_arms"):
        vals = [r[key] for r in rows if r.get(key) is not None]
        out[key] = statistics.median(vals) if vals else None
    return out


def render_ablation_table(results: list[dict]) -> str:
    """Text table with the standard column structure."""
    header = (f"{'Architecture':<18} {'h2h':>4} {'ah2ah':>6} {'Smooth':>7} "
              f"{'FK':>4} {'MPJPE(hands)':>13} {'MPJPE(overall)':>15} "
              f"{'MPJRE(arms)':>12}")
    lines = [header, "-" * len(header)]
    for entry in results:
        row = entry["row"]
        name = row.get("name", row.get("arch", "?"))
        if not entry.get("available", True):
            lines.append(f"{name:<18} {'unavailable':>62}")
            continue
        med = entry["median"]
        h2h = "x" if row.get("mode") == "h2h" else " "
        ah2ah = "x" if row.get("mode", "ah2ah") == "ah2ah" else " "
        sm = "x" if row.get("smooth") else " "
        fk = "x" if row.get("fk") else " "

        def fmt(v):
            return "-" if v is None else f"{v:.4f}"
        lines.append(
            f"{name:<18} {h2h:>4} {ah2ah:>6} {sm:>7} {fk:>4} "
            f"{fmt(med['mpjpe_hands']):>13} {fmt(med['mpjpe_overall']):>15} "
            f"{fmt(med['mpjre_arms']):>12}")
    return "\n".join(lines)


def write_ablation(out_dir, results: list[dict]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(render_ablation_table(results) + "\n")
    with open(out / "ablation.jsonl", "w", encoding="utf-8") as fh:
        for entry in results:
            fh.write(json.dumps(entry) + "\n")
