"""Capture-to-manifest data pipeline.

Teleop sessions append newline-delimited JSON records; images and velocity
labels are timestamp-synchronized, labeled, stratified-split 85:15, and
normalized with statistics computed from the training split only.  Horizontal
flips mirror the image AND swap the turn labels, recorded per sample.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .grammar import SafetyCaps

MANIFEST_VERSION = 1
DEFAULT_SYNC_TOLERANCE_NS = 100_000_000  # 100 ms


class PipelineError(ValueError):
    pass


# ---- capture log --------------------------------------------------------------

@dataclass(frozen=True)
class CaptureRecord:
    ts_ns: int       # nanoseconds since epoch
    image: str       # path to a lossless image or .npy blob
    linear: float    # m/s
    angular: float   # rad/s


def append_capture(fh, record: CaptureRecord) -> None:
    fh.write(json.dumps({"ts_ns": record.ts_ns, "image": record.image,
                         "linear": record.linear, "angular": record.angular},
                        sort_keys=True) + "\n")


def read_capture_log(path, caps: SafetyCaps = SafetyCaps()) -> list:
    """Parse and validate one session file (monotone timestamps, capped
    velocities, finite values)."""
    records = []
    last_ts = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rec = CaptureRecord(int(obj["ts_ns"]), str(obj["image"]),
                                    float(obj["linear"]), float(obj["angular"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise PipelineError(f"{path}:{lineno}: malformed record ({exc})")
            if not (math.isfinite(rec.linear) and math.isfinite(rec.angular)):
                raise PipelineError(f"{path}:{lineno}: non-finite velocity")
            if abs(rec.linear) > caps.linear + 1e-9 or abs(rec.angular) > caps.angular + 1e-9:
                raise PipelineError(
                    f"{path}:{lineno}: velocity ({rec.linear}, {rec.angular}) "
                    f"exceeds safety caps ({caps.linear}, {caps.angular})")
            if last_ts is not None and rec.ts_ns < last_ts:
                raise PipelineError(
                    f"{path}:{lineno}: timestamp inversion {last_ts} -> {rec.ts_ns}")
            last_ts = rec.ts_ns
            records.append(rec)
    return records


# ---- synchronization ----------------------------------------------------------

@dataclass(frozen=True)
class SyncedPair:
    image_ref: str
    label: str
    ts_image_ns: int
    ts_action_ns: int

    @property
    def delta_ns(self) -> int:
        return abs(self.ts_image_ns - self.ts_action_ns)


def _check_sorted(ts, what: str) -> None:
    arr = np.asarray(ts, dtype=np.int64)
    if arr.size > 1:
        bad = np.flatnonzero(np.diff(arr) < 0)
        if bad.size:
            i = int(bad[0])
            raise PipelineError(
                f"{what} timestamps not sorted: index {i} ({arr[i]}) precedes "
                f"index {i + 1} ({arr[i + 1]})")


def synchronize_indices(image_ts, action_ts, tolerance_ns: int):
    """Match each image to the action with minimal |dt| (lowest index on ties).

    One-pass two-cursor walk over both sorted streams; returns (matches,
    dropped) where matches is a list of (image_idx, action_idx) with
    |dt| <= tolerance and dropped counts images beyond tolerance.
    """
    _check_sorted(image_ts, "image")
    _check_sorted(action_ts, "action")
    img = np.asarray(image_ts, dtype=np.int64)
    act = np.asarray(action_ts, dtype=np.int64)
    matches, dropped = [], 0
    if act.size == 0:
        return matches, int(img.size)
    j = 0
    for i, t in enumerate(img):
        while j + 1 < act.size and abs(int(act[j + 1]) - int(t)) < abs(int(act[j]) - int(t)):
            j += 1
        if abs(int(act[j]) - int(t)) <= tolerance_ns:
            matches.append((i, j))
        else:
            dropped += 1
    return matches, dropped


# ---- velocity labeling --------------------------------------------------------

@dataclass(frozen=True)
class LabelThresholds:
    stop_linear: float = 0.05    # m/s deadband
    stop_angular: float = 0.05   # rad/s deadband
    turn_dominance: float = 1.0  # |w| >= dominance * |v| selects a turn


def velocity_to_class(linear: float, angular: float,
                      thresholds: LabelThresholds = LabelThresholds()) -> str:
    if not (math.isfinite(linear) and math.isfinite(angular)):
        raise PipelineError("non-finite velocities")
    if abs(linear) < thresholds.stop_linear and abs(angular) < thresholds.stop_angular:
        return "stop"
    if abs(angular) >= thresholds.turn_dominance * abs(linear) and \
            abs(angular) >= thresholds.stop_angular:
        return "turn_left" if angular > 0 else "turn_right"
    return "forward" if linear > 0 else "backward"


# ---- image IO / preprocessing --------------------------------------------------

def save_image(path, img: np.ndarray) -> None:
    """Lossless store: .png (8-bit) or .npy (exact float32)."""
    path = str(path)
    if path.endswith(".npy"):
        np.save(path, np.asarray(img, dtype=np.float32))
    else:
        arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    path = str(path)
    if path.endswith(".npy"):
        return np.load(path).astype(np.float32)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except OSError as exc:
        raise PipelineError(f"corrupt image file {path}: {exc}")
    return arr / np.float32(255.0)


def resize_bilinear(img: np.ndarray, target: int) -> np.ndarray:
    """Half-pixel-center bilinear resize to (target, target); deterministic."""
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape[:2]
    if h == target and w == target:
        return img.copy()

    def axis_coords(src, dst):
        pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
        pos = np.clip(pos, 0.0, src - 1.0)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, src - 1)
        frac = pos - lo
        return lo, hi, frac

    ylo, yhi, fy = axis_coords(h, target)
    xlo, xhi, fx = axis_coords(w, target)
    top = img[ylo][:, xlo] * (1 - fx)[None, :, None] + img[ylo][:, xhi] * fx[None, :, None]
    bot = img[yhi][:, xlo] * (1 - fx)[None, :, None] + img[yhi][:, xhi] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return out.astype(np.float32)


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple  # per channel
    std: tuple

    def __post_init__(self):
        if any(not (s > 0) for s in self.std):
            raise PipelineError(f"channel std must be positive, got {self.std}")

    @classmethod
    def from_images(cls, images: np.ndarray) -> "NormalizationStats":
        arr = np.asarray(images, dtype=np.float64)
        mean = arr.mean(axis=tuple(range(arr.ndim - 1)))
        std = arr.std(axis=tuple(range(arr.ndim - 1)))
        std = np.where(std < 1e-6, 1.0, std)  # degenerate channels pass through
        return cls(mean=tuple(float(m) for m in mean),
                   std=tuple(float(s) for s in std))

    def apply(self, img: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=np.float32)
        std = np.asarray(self.std, dtype=np.float32)
        return ((np.asarray(img, dtype=np.float32) - mean) / std).astype(np.float32)


def preprocess(img: np.ndarray, target_size: int, stats: NormalizationStats) -> np.ndarray:
    return stats.apply(resize_bilinear(img, target_size))


# ---- augmentation --------------------------------------------------------------

FLIP_LABEL = {"turn_left": "turn_right", "turn_right": "turn_left",
              "forward": "forward", "backward": "backward", "stop": "stop"}


def flip_image(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.flip(np.asarray(img), axis=1))


def augment_flip(image: np.ndarray, label: str, p: float,
                 rng: np.random.Generator):
    """With probability p mirror the image and swap turn labels.

    Returns (image, label, flipped).
    """
    if p > 0.0 and rng.random() < p:
        return flip_image(image), FLIP_LABEL[label], True
    return image, label, False


# ---- manifest -------------------------------------------------------------------

@dataclass
class ManifestSample:
    image: str
    label: str
    split: str       # "train" | "val" | "" before assignment
    flipped: bool
    ts_image_ns: int
    ts_action_ns: int


@dataclass
class DatasetManifest:
    seed: int
    tolerance_ns: int
    samples: list = field(default_factory=list)
    stats: Optional[NormalizationStats] = None
    dropped: int = 0
    image_size: int = 32

    @property
    def class_counts(self) -> dict:
        counts = {}
        for s in self.samples:
            counts[s.label] = counts.get(s.label, 0) + 1
        return counts

    def split_counts(self):
        tr = sum(1 for s in self.samples if s.split == "train")
        va = sum(1 for s in self.samples if s.split == "val")
        return tr, va

    def save(self, path) -> None:
        doc = {
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "tolerance_ns": self.tolerance_ns,
            "image_size": self.image_size,
            "dropped": self.dropped,
            "stats": None if self.stats is None else
                     {"mean": list(self.stats.mean), "std": list(self.stats.std)},
            "class_counts": self.class_counts,
            "samples": [asdict(s) for s in self.samples],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("version") != MANIFEST_VERSION:
            raise PipelineError(f"unsupported manifest version in {path}")
        m = cls(seed=doc["seed"], tolerance_ns=doc["tolerance_ns"],
                image_size=doc.get("image_size", 32), dropped=doc.get("dropped", 0))
        if doc.get("stats"):
            m.stats = NormalizationStats(mean=tuple(doc["stats"]["mean"]),
                                         std=tuple(doc["stats"]["std"]))
        m.samples = [ManifestSample(**s) for s in doc["samples"]]
        stored = doc.get("class_counts", {})
        if stored and stored != m.class_counts:
            raise PipelineError("manifest class counts disagree with sample list")
        return m


def stratified_split(labels, ratio: float, seed: int):
    """Per-class deterministic shuffle; returns array of "train"/"val".

    Each class keeps round(ratio * n) training samples (within half a sample
    of the exact split, hence within the +/-1 contract).
    """
    labels = list(labels)
    by_class = {}
    for i, lab in enumerate(labels):
        by_class.setdefault(lab, []).append(i)
    for lab, idx in sorted(by_class.items()):
        if len(idx) < 2:
            raise PipelineError(f"class {lab!r} has fewer than 2 samples")
    assign = np.empty(len(labels), dtype=object)
    rng = np.random.default_rng(seed)
    for lab, idx in sorted(by_class.items()):
        idx = np.array(idx)
        rng.shuffle(idx)
        n_train = int(round(ratio * len(idx)))
        n_train = min(max(n_train, 1), len(idx) - 1)  # both sides non-empty
        assign[idx[:n_train]] = "train"
        assign[idx[n_train:]] = "val"
    return assign.tolist()


def build_manifest(session_paths, out_dir, *, tolerance_ns=DEFAULT_SYNC_TOLERANCE_NS,
                   ratio: float = 0.85, seed: int = 0, flip_p: float = 0.5,
                   target_size: int = 32,
                   thresholds: LabelThresholds = LabelThresholds(),
                   caps: SafetyCaps = SafetyCaps()) -> DatasetManifest:
    """Full pipeline: sync, label, stratified split, train-only stats, flips.

    Writes preprocessed-size images (as .npy float32) next to the manifest
    and returns the manifest (caller saves it).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = []
    dropped_total = 0
    for path in session_paths:
        records = read_capture_log(path, caps=caps)
        image_events = [(r.ts_ns, r.image) for r in records if r.image]
        # action records are the image-free entries (the dedicated command
        # stream); sessions that inline everything fall back to all records
        action_records = [r for r in records if not r.image] or records
        action_events = [(r.ts_ns, (r.linear, r.angular)) for r in action_records]
        matches, dropped = synchronize_indices(
            [t for t, _ in image_events], [t for t, _ in action_events], tolerance_ns)
        dropped_total += dropped
        for ii, aj in matches:
            ts_i, ref = image_events[ii]
            ts_a, (lin, ang) = action_events[aj]
            label = velocity_to_class(lin, ang, thresholds)
            pairs.append(SyncedPair(ref, label, ts_i, ts_a))

    if not pairs:
        raise PipelineError("no synchronized pairs survived")
    assign = stratified_split([p.label for p in pairs], ratio, seed)

    # resize first, then stats from the training split only (no leakage)
    resized = [resize_bilinear(load_image(p.image_ref), target_size) for p in pairs]
    train_imgs = np.stack([im for im, a in zip(resized, assign) if a == "train"])
    stats = NormalizationStats.from_images(train_imgs)

    rng = np.random.default_rng(seed)
    manifest = DatasetManifest(seed=seed, tolerance_ns=tolerance_ns,
                               stats=stats, dropped=dropped_total,
                               image_size=target_size)
    for i, (pair, img, a) in enumerate(zip(pairs, resized, assign)):
        label = pair.label
        flipped = False
        if a == "train":
            img, label, flipped = augment_flip(img, label, flip_p, rng)
        ref = str(out_dir / f"sample_{i:06d}.npy")
        np.save(ref, img.astype(np.float32))
        manifest.samples.append(ManifestSample(
            image=ref, label=label, split=a, flipped=flipped,
            ts_image_ns=pair.ts_image_ns, ts_action_ns=pair.ts_action_ns))
    return manifest


def load_training_arrays(manifest: DatasetManifest, action_vocab):
    """Materialize ((X_train, y_train), (X_val, y_val)) normalized float32."""
    if manifest.stats is None:
        raise PipelineError("manifest has no normalization stats")
    index = {verb: i for i, verb in enumerate(action_vocab)}
    xs = {"train": [], "val": []}
    ys = {"train": [], "val": []}
    for s in manifest.samples:
        if s.split not in xs:
            continue
        xs[s.split].append(manifest.stats.apply(np.load(s.image)))
        ys[s.split].append(index[s.label])
    return ((np.stack(xs["train"]), np.array(ys["train"], dtype=np.int64)),
            (np.stack(xs["val"]), np.array(ys["val"], dtype=np.int64)))
