"""Synthetic correlated arm-hand motion, preprocessing and clip storage.

The generator stands in for a mocap corpus: arm rotations are sums of
band-limited sinusoids, hand rotations blend a deterministic function of the
concurrent arm state with an independent harmonic stream, and 2D hand
keypoints come from projecting FK positions through a pinhole camera with
pixel noise and detection dropout. Everything is reproducible from a single
seed.

Preprocessing follows the estimation pipeline's input contract: per-hand
keypoints are re-expressed relative to the hand root and its tight bounding
box, missing detections are forward-filled (leading gaps become zeros), and
each frame is assembled into 46 three-value tokens (4 arm direction vectors
plus 42 zero-padded hand points, 138 values flat).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .kinematics import (
    Camera,
    HAND_JOINT_COUNT,
    JOINT_COUNT,
    KEYPOINTS_PER_HAND,
    ProjectionError,
    Skeleton,
    arm_direction_vectors,
    canonicalize_axis_angle,
    forward_kinematics,
    project,
)

WINDOW_SIZE = 32
WINDOW_STEP = 5
TOKEN_COUNT = 46          # 4 arm direction vectors + 42 hand keypoints
TOKEN_DIM = 3
FLAT_FEATURE_DIM = TOKEN_COUNT * TOKEN_DIM  # 138
RAW_FEATURE_DIM = 4 * 3 + HAND_JOINT_COUNT * 2  # 96 before zero padding

_CLIP_MAGIC = b"AHCLIP\x00\x01"  # 6-byte tag, NUL, format version 1
_MANIFEST_FORMAT = "armhand-dataset/1"
_DEPTH_FLOOR = 0.05
_ROOT_RETRIES = 50


class ClipTooShortError(ValueError):
    """A clip has fewer frames than one window."""


class DataFormatError(ValueError):
    """A clip or manifest file failed validation."""


# -- domain types -------------------------------------------------------------


@dataclass
class SynthConfig:
    """Knobs for the synthetic motion generator; the seed fixes everything."""

    sequences: int = 500
    frames: int = 400
    fps: float = 30.0
    seed: int = 0
    correlation: float = 0.8
    detection_dropout: float = 0.05
    pixel_noise: float = 2.0
    train_fraction: float = 0.9

    def __post_init__(self):
        if self.sequences < 1:
            raise ValueError("sequences must be >= 1")
        if self.frames < 2:
            raise ValueError("frames must be >= 2")
        if not 0.0 <= self.correlation <= 1.0:
            raise ValueError("correlation must lie in [0, 1]")
        if not 0.0 <= self.detection_dropout < 1.0:
            raise ValueError("detection_dropout must lie in [0, 1)")
        if self.pixel_noise < 0.0:
            raise ValueError("pixel_noise must be >= 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")


class MotionClip:
    """Ground-truth rotations plus root path; joint positions derived via FK."""

    def __init__(self, rotations: np.ndarray, root_positions: np.ndarray,
                 fps: float, skeleton: Skeleton | None = None):
        self.rotations = np.asarray(rotations, dtype=np.float64)
        self.root_positions = np.asarray(root_positions, dtype=np.float64)
        self.fps = float(fps)
        self.skeleton = skeleton
        if self.rotations.ndim != 3 or self.rotations.shape[1:] != (JOINT_COUNT, 3):
            raise DataFormatError(
                f"rotations must be (T, {JOINT_COUNT}, 3), got {self.rotations.shape}")
        if self.root_positions.shape != (self.rotations.shape[0], 3):
            raise DataFormatError("root_positions must be (T, 3)")
        self._local_positions: np.ndarray | None = None

    @property
    def frame_count(self) -> int:
        return self.rotations.shape[0]

    def local_positions(self, skeleton: Skeleton | None = None) -> np.ndarray:
        """FK joint positions with the root pinned at the origin, cached."""
        skeleton = skeleton or self.skeleton
        if skeleton is None:
            raise ValueError("clip carries no skeleton; pass one explicitly")
        if self._local_positions is None:
            self._local_positions = forward_kinematics(skeleton, self.rotations)
        return self._local_positions

    def world_positions(self, skeleton: Skeleton | None = None) -> np.ndarray:
        return self.local_positions(skeleton) + self.root_positions[:, None, :]


class KeypointClip:
    """Model input stream: arm direction vectors plus detected 2D hand points."""

    def __init__(self, arm_dirs: np.ndarray, hand_points: np.ndarray,
                 valid: np.ndarray, fps: float):
        self.arm_dirs = np.asarray(arm_dirs, dtype=np.float64)
        self.hand_points = np.asarray(hand_points, dtype=np.float64)
        self.valid = np.asarray(valid, dtype=bool)
        self.fps = float(fps)
        t = self.arm_dirs.shape[0]
        if self.arm_dirs.shape != (t, 4, 3):
            raise DataFormatError(f"arm_dirs must be (T, 4, 3), got {self.arm_dirs.shape}")
        if self.hand_points.shape != (t, HAND_JOINT_COUNT, 2):
            raise DataFormatError(
                f"hand_points must be (T, {HAND_JOINT_COUNT}, 2), got {self.hand_points.shape}")
        if self.valid.shape != (t, 2):
            raise DataFormatError(f"valid must be (T, 2), got {self.valid.shape}")

    @property
    def frame_count(self) -> int:
        return self.arm_dirs.shape[0]


@dataclass
class Window:
    """One training sample: aligned features and targets over f frames."""

    features: np.ndarray   # (f, 46, 3)
    rotations: np.ndarray  # (f, 48, 3)
    positions: np.ndarray  # (f, 48, 3), root at origin
    clip_index: int = -1
    start: int = 0

    def __post_init__(self):
        f = self.features.shape[0]
        if not (self.rotations.shape[0] == self.positions.shape[0] == f):
            raise DataFormatError("window features and targets must cover equal frames")


# -- synthesis ----------------------------------------------------------------

# amplitude caps (radians) for shoulder / elbow / wrist harmonic banks
_ARM_AMPLITUDE = np.array([0.9, 1.1, 0.5])
_HARMONICS = 3
# disjoint frequency bands (Hz): arm motion is slow, the independent hand
# stream faster; the gap keeps independent channels measurably uncorrelated
# over finite clips (no accidental frequency coincidences across groups)
_ARM_BAND = (0.15, 0.60)
_HAND_BAND = (0.65, 1.20)

# fixed smooth hand map: per-finger curl weights and per-segment bend (rad)
_FINGER_WEIGHTS = np.array([0.7, 1.0, 1.05, 1.0, 0.9])   # thumb..pinky
_SEGMENT_BEND = np.array([1.1, 1.3, 0.8])                 # mcp, pip, dip
_SPREAD_SIGNS = np.array([0.0, 1.0, 0.3, -0.4, -1.0])


def _harmonics(rng: np.random.Generator, t: np.ndarray, channels: int,
               amplitude: float, band=_ARM_BAND) -> np.ndarray:
    """Band-limited random signal bank, (T, channels), |signal| <= amplitude."""
    freqs = rng.uniform(*band, size=(channels, _HARMONICS))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(channels, _HARMONICS))
    weights = rng.uniform(0.3, 1.0, size=(channels, _HARMONICS))
    weights = weights / weights.sum(axis=1, keepdims=True) * amplitude
    arg = 2.0 * np.pi * freqs[None] * t[:, None, None] + phases[None]
    return (weights[None] * np.sin(arg)).sum(axis=-1)


def _hand_rotations_from_drivers(curl: np.ndarray, spread: np.ndarray,
                                 palm_twist: np.ndarray, side: int) -> np.ndarray:
    """Map driver signals to 21 per-joint axis-angle rotations for one hand.

    curl: (T, 5) per-finger closure in [0, 1]; spread: (T,); palm_twist: (T,).
    side: -1 left, +1 right (flips the bend direction).
    """
    t = curl.shape[0]
    rot = np.zeros((t, KEYPOINTS_PER_HAND, 3))
    rot[:, 0, 0] = 0.2 * palm_twist
    for f in range(5):
        base = 1 + 4 * f
        angle = curl[:, f][:, None] * _SEGMENT_BEND[None, :]  # (T, 3)
        if f == 0:  # thumb folds across the palm
            rot[:, base:base + 3, 1] = side * angle
        else:
            rot[:, base:base + 3, 2] = -side * angle
            rot[:, base, 1] += side * _SPREAD_SIGNS[f] * spread
    return rot


def _driven_hand_state(arm_rot: np.ndarray, side_slice: slice):
    """Fixed smooth map from concurrent arm rotations to hand drivers."""
    shoulder, elbow, wrist = (arm_rot[:, side_slice, :][:, i, :] for i in range(3))
    elev = shoulder[:, 2]
    twist = elbow[:, 0] + 0.5 * wrist[:, 0]
    curl_base = 0.5 * (1.0 + np.tanh(1.4 * elev + 1.0 * twist))
    curl = curl_base[:, None] * _FINGER_WEIGHTS[None, :]
    spread = 0.35 * np.tanh(1.2 * elev - 0.8 * twist)
    palm = 0.5 * np.tanh(twist)
    return curl, spread, palm


def _noise_hand_state(rng: np.random.Generator, t: np.ndarray):
    raw = _harmonics(rng, t, channels=5, amplitude=1.2, band=_HAND_BAND)
    curl = 0.5 * (1.0 + np.tanh(raw)) * _FINGER_WEIGHTS[None, :]
    spread = 0.35 * np.tanh(_harmonics(rng, t, 1, 1.2, band=_HAND_BAND)[:, 0])
    palm = 0.5 * np.tanh(_harmonics(rng, t, 1, 1.0, band=_HAND_BAND)[:, 0])
    return curl, spread, palm


def _synthesize_sequence(rng: np.random.Generator, config: SynthConfig,
                         skeleton: Skeleton, camera: Camera):
    t = np.arange(config.frames) / config.fps

    # arm rotations: 6 joints x 3 channels of band-limited harmonics
    arm_rot = np.zeros((config.frames, 6, 3))
    for k, amp in enumerate(_ARM_AMPLITUDE):       # shoulder, elbow, wrist
        for s in range(2):                          # left, right
            arm_rot[:, 3 * s + k, :] = _harmonics(rng, t, 3, amp)
    arm_rot = canonicalize_axis_angle(arm_rot)

    # hand rotations: blend of the arm-driven map and an independent stream
    hands = []
    for s, side in enumerate((-1, +1)):
        curl_d, spread_d, palm_d = _driven_hand_state(arm_rot, slice(3 * s, 3 * s + 3))
        driven = _hand_rotations_from_drivers(curl_d, spread_d, palm_d, side)
        curl_n, spread_n, palm_n = _noise_hand_state(rng, t)
        noise = _hand_rotations_from_drivers(curl_n, spread_n, palm_n, side)
        c = config.correlation
        hands.append(c * driven + (1.0 - c) * noise)
    hand_rot = canonicalize_axis_angle(np.concatenate(hands, axis=1))

    rotations = np.zeros((config.frames, JOINT_COUNT, 3))
    rotations[:, skeleton.arm_joint_indices, :] = arm_rot
    rotations[:, skeleton.hand_joint_indices, :] = hand_rot

    # root path with a depth guard so every hand joint stays in front of the camera
    base = np.array([0.0, -0.25, 2.4])
    roots = base[None, :] + _harmonics(rng, t, 3, 0.1)
    local = forward_kinematics(skeleton, rotations)
    hand_local = local[:, skeleton.hand_joint_indices, :]
    for i in range(config.frames):
        ok = False
        for _ in range(_ROOT_RETRIES):
            world = hand_local[i] + roots[i]
            depth = world @ camera.rotation.T[:, 2] + camera.translation[2]
            if np.all(depth > _DEPTH_FLOOR):
                ok = True
                break
            roots[i] = base + rng.uniform(0.5, 1.5) * np.array([0.0, 0.0, 1.0])
        if not ok:
            raise ProjectionError(
                f"frame {i}: could not place the root in front of the camera", i)

    clip = MotionClip(rotations, roots, config.fps, skeleton=skeleton)
    clip._local_positions = local

    world_hands = hand_local + roots[:, None, :]
    pixels = project(camera, world_hands)
    if config.pixel_noise > 0.0:
        pixels = pixels + rng.normal(0.0, config.pixel_noise, size=pixels.shape)
    valid = rng.random((config.frames, 2)) >= config.detection_dropout
    dirs = arm_direction_vectors(clip.world_positions(skeleton), skeleton)
    kclip = KeypointClip(dirs, pixels, valid, config.fps)
    return clip, kclip


def synthesize(config: SynthConfig, skeleton: Skeleton | None = None,
               camera: Camera | None = None):
    """Generate `config.sequences` (MotionClip, KeypointClip) pairs."""
    skeleton = skeleton or Skeleton.default()
    camera = camera or Camera()
    children = np.random.SeedSequence(config.seed).spawn(config.sequences)
    return [_synthesize_sequence(np.random.default_rng(c), config, skeleton, camera)
            for c in children]


# -- preprocessing --------------------------------------------------------------


def normalize_hands(hand_points: np.ndarray, valid=(True, True)):
    """Re-express one frame's 42 hand points relative to each hand.

    Per valid hand: subtract that hand's root keypoint (keypoint 0 of its 21),
    then divide by the width/height of the tight bounding box of its points.
    A degenerate box (zero width or height) downgrades the hand to invalid.
    Invalid hands pass through untouched. Returns (points, valid_out).
    """
    pts = np.array(hand_points, dtype=np.float64, copy=True)
    if pts.shape != (HAND_JOINT_COUNT, 2):
        raise DataFormatError(
            f"expected ({HAND_JOINT_COUNT}, 2) hand points, got {pts.shape}")
    valid_out = [bool(valid[0]), bool(valid[1])]
    for h in range(2):
        if not valid_out[h]:
            continue
        block = slice(h * KEYPOINTS_PER_HAND, (h + 1) * KEYPOINTS_PER_HAND)
        hand = pts[block]
        extent = hand.max(axis=0) - hand.min(axis=0)
        if np.any(extent <= 0.0):
            valid_out[h] = False
            continue
        pts[block] = (hand - hand[0]) / extent
    return pts, tuple(valid_out)


def fill_hand_frames(points: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Forward-fill invalid per-hand frames; leading gaps become zeros."""
    pts = np.array(points, dtype=np.float64, copy=True)
    t = pts.shape[0]
    for h in range(2):
        block = slice(h * KEYPOINTS_PER_HAND, (h + 1) * KEYPOINTS_PER_HAND)
        last = None
        for i in range(t):
            if valid[i, h]:
                last = pts[i, block].copy()
            elif last is None:
                pts[i, block] = 0.0
            else:
                pts[i, block] = last
    return pts


def fill_missing(clip: KeypointClip) -> KeypointClip:
    """KeypointClip with every hand frame populated (previous-frame rule)."""
    filled = fill_hand_frames(clip.hand_points, clip.valid)
    return KeypointClip(clip.arm_dirs, filled,
                        np.ones_like(clip.valid, dtype=bool), clip.fps)


def make_windows(frame_count: int, window: int = WINDOW_SIZE,
                 step: int = WINDOW_STEP) -> list[int]:
    """Sliding-window start indices: 0, step, 2*step, ..."""
    if frame_count < window:
        raise ClipTooShortError(
            f"clip has {frame_count} frames, needs at least {window}")
    return list(range(0, frame_count - window + 1, step))


def assemble_features(arm_dirs: np.ndarray, hand_points: np.ndarray) -> np.ndarray:
    """Token grid for one or many frames: (..., 46, 3).

    4 arm direction vectors followed by 42 hand points zero-padded from
    (x, y) to (x, y, 0). Flatten the trailing axes for the 138-vector form.
    """
    dirs = np.asarray(arm_dirs, dtype=np.float64)
    pts = np.asarray(hand_points, dtype=np.float64)
    padded = np.concatenate([pts, np.zeros(pts.shape[:-1] + (1,))], axis=-1)
    return np.concatenate([dirs, padded], axis=-2)


def preprocess_keypoints(clip: KeypointClip) -> np.ndarray:
    """Full input pipeline for a clip: normalize, fill, tokenize -> (T, 46, 3)."""
    t = clip.frame_count
    norm = np.zeros_like(clip.hand_points)
    valid = np.zeros_like(clip.valid)
    for i in range(t):
        norm[i], v = normalize_hands(clip.hand_points[i], clip.valid[i])
        valid[i] = v
    filled = fill_hand_frames(norm, valid)
    return assemble_features(clip.arm_dirs, filled)


def clip_windows(mclip: MotionClip, kclip: KeypointClip, skeleton: Skeleton,
                 window: int = WINDOW_SIZE, step: int = WINDOW_STEP,
                 clip_index: int = -1) -> list[Window]:
    """Aligned feature/target windows for one clip."""
    features = preprocess_keypoints(kclip)
    positions = mclip.local_positions(skeleton)
    out = []
    for start in make_windows(mclip.frame_count, window, step):
        sl = slice(start, start + window)
        out.append(Window(features[sl], mclip.rotations[sl], positions[sl],
                          clip_index=clip_index, start=start))
    return out


# -- serialization ----------------------------------------------------------------


def write_clip(path, mclip: MotionClip, kclip: KeypointClip) -> None:
    """Versioned little-endian binary clip file (see README for the layout)."""
    if mclip.frame_count != kclip.frame_count:
        raise DataFormatError("motion and keypoint clips disagree on frame count")
    t = mclip.frame_count
    with open(path, "wb") as fh:
        fh.write(_CLIP_MAGIC)
        fh.write(struct.pack("<IdI", t, mclip.fps, JOINT_COUNT))
        fh.write(mclip.rotations.astype("<f8").tobytes())
        fh.write(mclip.root_positions.astype("<f8").tobytes())
        fh.write(kclip.arm_dirs.astype("<f8").tobytes())
        fh.write(kclip.hand_points.astype("<f8").tobytes())
        fh.write(kclip.valid.astype("<u1").tobytes())


def read_clip(path, skeleton: Skeleton | None = None):
    """Inverse of write_clip -> (MotionClip, KeypointClip)."""
    raw = Path(path).read_bytes()
    if raw[:8] != _CLIP_MAGIC:
        raise DataFormatError(f"{path}: bad magic or unsupported clip version")
    t, fps, joints = struct.unpack_from("<IdI", raw, 8)
    if joints != JOINT_COUNT:
        raise DataFormatError(f"{path}: expected {JOINT_COUNT} joints, found {joints}")
    off = 8 + struct.calcsize("<IdI")

    def take(shape, dtype="<f8"):
        nonlocal off
        n = int(np.prod(shape)) * np.dtype(dtype).itemsize
        if off + n > len(raw):
            raise DataFormatError(f"{path}: truncated clip payload")
        arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=off)
        off += n
        return arr.reshape(shape).astype(np.float64) if dtype == "<f8" else arr.reshape(shape)

    rotations = take((t, JOINT_COUNT, 3))
    roots = take((t, 3))
    dirs = take((t, 4, 3))
    pts = take((t, HAND_JOINT_COUNT, 2))
    valid = take((t, 2), "<u1").astype(bool)
    if off != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return (MotionClip(rotations, roots, fps, skeleton=skeleton),
            KeypointClip(dirs, pts, valid, fps))


def export_clip_json(path, mclip: MotionClip, kclip: KeypointClip) -> None:
    """Lossless structured-text debug export (floats round-trip via repr)."""
    doc = {
        "format": "armhand-clip-debug/1",
        "fps": mclip.fps,
        "frames": mclip.frame_count,
        "rotations": mclip.rotations.tolist(),
        "root_positions": mclip.root_positions.tolist(),
        "arm_dirs": kclip.arm_dirs.tolist(),
        "hand_points": kclip.hand_points.tolist(),
        "valid": kclip.valid.astype(int).tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def import_clip_json(path, skeleton: Skeleton | None = None):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "armhand-clip-debug/1":
        raise DataFormatError(f"{path}: not a clip debug export")
    return (MotionClip(np.array(doc["rotations"]), np.array(doc["root_positions"]),
                       doc["fps"], skeleton=skeleton),
            KeypointClip(np.array(doc["arm_dirs"]), np.array(doc["hand_points"]),
                         np.array(doc["valid"], dtype=bool), doc["fps"]))


# -- dataset on disk -----------------------------------------------------------


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_dataset(out_dir, config: SynthConfig, skeleton: Skeleton | None = None,
                  camera: Camera | None = None, clips=None) -> dict:
    """Synthesize (unless given) and persist clips, split and manifest."""
    skeleton = skeleton or Skeleton.default()
    camera = camera or Camera()
    if clips is None:
        clips = synthesize(config, skeleton, camera)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    split_rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, 0x5F1177]))
    order = split_rng.permutation(len(clips))
    n_train = int(round(config.train_fraction * len(clips)))
    split = np.array(["test"] * len(clips), dtype=object)
    split[order[:n_train]] = "train"

    entries = []
    for i, (mclip, kclip) in enumerate(clips):
        name = f"clip_{i:04d}.ahc"
        write_clip(out / name, mclip, kclip)
        entries.append({
            "file": name,
            "frames": mclip.frame_count,
            "split": str(split[i]),
            "sha256": _sha256(out / name),
        })
    manifest = {
        "format": _MANIFEST_FORMAT,
        "synth_config": asdict(config),
        "camera": camera.to_dict(),
        "skeleton_fingerprint": skeleton.fingerprint(),
        "clips": entries,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


@dataclass
class Dataset:
    """An on-disk dataset pulled back into memory."""

    manifest: dict
    skeleton: Skeleton
    camera: Camera
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    @property
    def skeleton_fingerprint(self) -> str:
        return self.manifest["skeleton_fingerprint"]


def load_dataset(data_dir, skeleton: Skeleton | None = None,
                 verify_hashes: bool = False) -> Dataset:
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataFormatError(f"{data_dir}: no manifest.json — not a dataset directory")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != _MANIFEST_FORMAT:
        raise DataFormatError(f"{manifest_path}: unsupported manifest format")
    skeleton = skeleton or Skeleton.default()
    if manifest["skeleton_fingerprint"] != skeleton.fingerprint():
        raise DataFormatError(
            "dataset was generated with a different skeleton "
            f"(manifest {manifest['skeleton_fingerprint'][:12]}..., "
            f"loaded {skeleton.fingerprint()[:12]}...)")
    camera = Camera.from_dict(manifest["camera"])
    ds = Dataset(manifest, skeleton, camera)
    for entry in manifest["clips"]:
        path = data_dir / entry["file"]
        if verify_hashes and _sha256(path) != entry["sha256"]:
            raise DataFormatError(f"{path}: content hash mismatch")
        pair = read_clip(path, skeleton=skeleton)
        (ds.train if entry["split"] == "train" else ds.test).append(pair)
    return ds


def dataset_windows(pairs, skeleton: Skeleton, window: int = WINDOW_SIZE,
                    step: int = WINDOW_STEP, on_short: str = "skip") -> list[Window]:
    """Windows across many clips; short clips are skipped (or raise)."""
    out: list[Window] = []
    for i, (mclip, kclip) in enumerate(pairs):
        try:
            out.extend(clip_windows(mclip, kclip, skeleton, window, step, clip_index=i))
        except ClipTooShortError:
            if on_short != "skip":
                raise
    return out
