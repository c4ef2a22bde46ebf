"""Procedural paired adverse/normal scenes with warp-confidence maps.

Stands in for GNSS-matched real image pairs and a learned warping module:
scenes are composited colored shapes with exact labels, the "normal" view is
the clean render under a small random affine jitter, the "adverse" view is a
parametric corruption (fog/night/rain/snow) of the same scene, and the
per-patch confidence map is synthesized from the known misalignment so the
downstream gating semantics stay testable.

Every generator is a pure function of (config, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import CONDITIONS, DataConfig

MANIFEST_VERSION = 1

# base color per class: background, road band, blob, bar
CLASS_COLORS = np.array(
    [
        [0.20, 0.55, 0.25],
        [0.45, 0.45, 0.50],
        [0.85, 0.30, 0.25],
        [0.25, 0.35, 0.85],
    ],
    dtype=np.float64,
)

LOW_CONFIDENCE = 0.05


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    labels: np.ndarray  # (H, W) int
    seed: int


@dataclass
class TrainBatch:
    """What the training losses may see: no ground-truth labels."""

    adverse_image: np.ndarray
    normal_image: np.ndarray
    confidence: np.ndarray  # per-patch, (grid, grid) in [0, 1]
    condition: str
    seed: int


@dataclass
class PairedSample:
    adverse_image: np.ndarray
    normal_image: np.ndarray
    confidence: np.ndarray
    labels: np.ndarray  # evaluation only
    condition: str
    seed: int

    def train_batch(self) -> TrainBatch:
        return TrainBatch(
            adverse_image=self.adverse_image,
            normal_image=self.normal_image,
            confidence=self.confidence,
            condition=self.condition,
            seed=self.seed,
        )


def _rng(*entropy) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy))


def generate_scene(seed: int, image_size: int = 64) -> Scene:
    """Composite 3-8 shapes over a background; labels track the topmost shape."""
    rng = _rng(seed, 0)
    h = w = image_size
    yy, xx = np.mgrid[0:h, 0:w]
    labels = np.zeros((h, w), dtype=np.int64)
    image = np.empty((h, w, 3), dtype=np.float64)
    tint = rng.uniform(-0.05, 0.05, size=3)
    image[:] = np.clip(CLASS_COLORS[0] + tint, 0, 1)

    n_shapes = int(rng.integers(3, 9))
    for _ in range(n_shapes):
        cls = int(rng.integers(1, 4))
        color = np.clip(CLASS_COLORS[cls] + rng.uniform(-0.06, 0.06, size=3), 0, 1)
        if cls == 1:  # horizontal road band
            y0 = int(rng.integers(0, h - 8))
            band = int(rng.integers(6, 14))
            mask = (yy >= y0) & (yy < y0 + band)
        elif cls == 2:  # blob
            cy, cx = rng.integers(4, h - 4), rng.integers(4, w - 4)
            r = int(rng.integers(4, 11))
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:  # bar
            y0, x0 = rng.integers(0, h - 6), rng.integers(0, w - 6)
            bh, bw = rng.integers(4, 12), rng.integers(4, 12)
            mask = (yy >= y0) & (yy < y0 + bh) & (xx >= x0) & (xx < x0 + bw)
        labels[mask] = cls
        image[mask] = color

    image += rng.normal(0.0, 0.015, size=image.shape)
    return Scene(image=np.clip(image, 0.0, 1.0), labels=labels, seed=seed)


def _smooth_field(rng: np.random.Generator, size: int, cells: int = 8) -> np.ndarray:
    """Smooth [0, 1] noise field from an upsampled coarse grid."""
    coarse = rng.uniform(0.0, 1.0, size=(cells, cells))
    return np.clip(ndimage.zoom(coarse, size / cells, order=1, mode="nearest"), 0, 1)


def apply_condition(
    image: np.ndarray, condition: str, severity: float, seed: int
) -> np.ndarray:
    """Parametric corruption; severity 0 is the identity, output stays in [0,1]."""
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")
    if not 0.0 <= severity <= 1.0:
        raise ValueError("severity must lie in [0, 1]")
    if severity == 0.0:
        return image.copy()

    rng = _rng(seed, 2 + CONDITIONS.index(condition))
    h, w, _ = image.shape
    out = image.astype(np.float64).copy()

    if condition == "fog":
        haze = _smooth_field(rng, h)
        alpha = severity * (0.55 + 0.40 * haze)[..., None]
        out = (1 - alpha) * out + alpha * 0.75
    elif condition == "night":
        out = out ** (1.0 + 2.0 * severity)  # gamma darken
        scale = np.array([1 - 0.65 * severity, 1 - 0.55 * severity, 1 - 0.30 * severity])
        out = out * scale  # blue shift via weaker red/green attenuation
        out += rng.normal(0.0, 0.09 * severity, size=out.shape)  # sensor noise
    elif condition == "rain":
        streaks = np.zeros((h, w))
        n_streaks = int(90 * severity) + 1
        for _ in range(n_streaks):
            x0 = rng.integers(0, w)
            y0 = rng.integers(0, h - 8)
            length = int(rng.integers(6, 16))
            slant = rng.integers(-2, 3)
            for t in range(length):
                y = y0 + t
                x = int(x0 + slant * t / max(length - 1, 1))
                if 0 <= y < h and 0 <= x < w:
                    streaks[y, x] = 1.0
        out = out + 0.45 * severity * streaks[..., None]
        out = ndimage.gaussian_filter(out, sigma=(1.2 * severity, 1.2 * severity, 0))
    elif condition == "snow":
        speckle = rng.uniform(0, 1, size=(h, w)) < 0.20 * severity
        out = (out - 0.5) * (1 - 0.35 * severity) + 0.5 + 0.22 * severity  # washout
        out = ndimage.gaussian_filter(out, sigma=(0.5 * severity, 0.5 * severity, 0))
        out[speckle] = 0.95

    return np.clip(out, 0.0, 1.0)


def simulate_misalignment(
    scene: Scene,
    seed: int,
    patch_size: int = 8,
    max_translation: float = 2.0,
    max_rotation_deg: float = 1.0,
    max_dynamic_objects: int = 2,
    jitter: tuple[float, float, float] | None = None,
    object_patches: list[tuple[int, int]] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Warp the normal image with a small random affine and synthesize a
    per-patch confidence map.

    ``jitter`` (tx, ty, angle_deg) and ``object_patches`` override the random
    draws; object patches and affine-invalidated borders get confidence
    LOW_CONFIDENCE, below the 0.2 gate by construction.
    """
    rng = _rng(seed, 1)
    h, w, _ = scene.image.shape
    g = h // patch_size

    if jitter is None:
        tx = float(rng.uniform(-max_translation, max_translation))
        ty = float(rng.uniform(-max_translation, max_translation))
        angle = float(rng.uniform(-max_rotation_deg, max_rotation_deg))
    else:
        tx, ty, angle = jitter

    theta = np.deg2rad(angle)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]])
    offset = center - rot @ center + np.array([ty, tx])

    warped = np.stack(
        [
            ndimage.affine_transform(
                scene.image[..., c], rot, offset=offset, order=1, mode="nearest"
            )
            for c in range(3)
        ],
        axis=-1,
    )

    # displacement of each pixel under the affine map
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    src_y = rot[0, 0] * yy + rot[0, 1] * xx + offset[0]
    src_x = rot[1, 0] * yy + rot[1, 1] * xx + offset[1]
    disp = np.hypot(src_y - yy, src_x - xx)
    out_of_bounds = (src_y < 0) | (src_y > h - 1) | (src_x < 0) | (src_x > w - 1)

    disp_patch = disp.reshape(g, patch_size, g, patch_size).mean(axis=(1, 3))
    confidence = np.clip(1.0 - disp_patch / 8.0, 0.0, 1.0)
    invalid = out_of_bounds.reshape(g, patch_size, g, patch_size).any(axis=(1, 3))
    confidence[invalid] = LOW_CONFIDENCE

    if object_patches is None:
        n_obj = int(rng.integers(0, max_dynamic_objects + 1))
        object_patches = [
            (int(rng.integers(0, g)), int(rng.integers(0, g))) for _ in range(n_obj)
        ]
    for py, px in object_patches:
        color = rng.uniform(0.0, 1.0, size=3)
        y0, x0 = py * patch_size, px * patch_size
        warped[y0 : y0 + patch_size, x0 : x0 + patch_size] = color
        confidence[py, px] = LOW_CONFIDENCE

    return np.clip(warped, 0.0, 1.0), confidence


def make_pair(seed: int, condition: str, cfg: DataConfig, patch_size: int = 8,
              image_size: int = 64) -> PairedSample:
    scene = generate_scene(seed, image_size)
    adverse = apply_condition(scene.image, condition, cfg.severity, seed)
    normal, confidence = simulate_misalignment(
        scene,
        seed,
        patch_size=patch_size,
        max_translation=cfg.max_translation,
        max_rotation_deg=cfg.max_rotation_deg,
        max_dynamic_objects=cfg.max_dynamic_objects,
    )
    return PairedSample(
        adverse_image=adverse,
        normal_image=normal,
        confidence=confidence,
        labels=scene.labels,
        condition=condition,
        seed=seed,
    )


@dataclass
class DatasetSplits:
    source: list[Scene]
    train: list[PairedSample]
    val: list[PairedSample]
    seed_ranges: dict[str, tuple[int, int]] = field(default_factory=dict)


def build_dataset(
    cfg: DataConfig,
    patch_size: int = 8,
    image_size: int = 64,
    seed_starts: dict[str, int] | None = None,
) -> DatasetSplits:
    """Labeled source scenes + unlabeled train pairs + labeled val pairs,
    over pairwise-disjoint seed ranges (round-robin condition assignment)."""
    if min(cfg.n_train, cfg.n_val, cfg.n_source) < 1:
        raise ValueError("all split sizes must be >= 1")
    base = cfg.seed
    starts = seed_starts or {
        "source": base,
        "train": base + cfg.n_source,
        "val": base + cfg.n_source + cfg.n_train,
    }
    ranges = {
        "source": (starts["source"], starts["source"] + cfg.n_source),
        "train": (starts["train"], starts["train"] + cfg.n_train),
        "val": (starts["val"], starts["val"] + cfg.n_val),
    }
    names = list(ranges)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            lo_a, hi_a = ranges[a]
            lo_b, hi_b = ranges[b]
            if lo_a < hi_b and lo_b < hi_a:
                raise ValueError(f"seed ranges for {a!r} and {b!r} overlap")

    source = [generate_scene(s, image_size) for s in range(*ranges["source"])]
    train = [
        make_pair(s, CONDITIONS[i % len(CONDITIONS)], cfg, patch_size, image_size)
        for i, s in enumerate(range(*ranges["train"]))
    ]
    val = [
        make_pair(s, CONDITIONS[i % len(CONDITIONS)], cfg, patch_size, image_size)
        for i, s in enumerate(range(*ranges["val"]))
    ]
    return DatasetSplits(source=source, train=train, val=val, seed_ranges=ranges)


# ---- on-disk export ------------------------------------------------------


def export_dataset(splits: DatasetSplits, out_dir: str | Path) -> Path:
    """Write packed .npy tensors per split plus a versioned JSON manifest."""
    out = Path(out_dir)
    rows = []
    for split in ("train", "val"):
        pairs = getattr(splits, split)
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        np.save(d / "adverse.npy", np.stack([p.adverse_image for p in pairs]))
        np.save(d / "normal.npy", np.stack([p.normal_image for p in pairs]))
        np.save(d / "confidence.npy", np.stack([p.confidence for p in pairs]))
        np.save(d / "labels.npy", np.stack([p.labels for p in pairs]))
        for i, p in enumerate(pairs):
            rows.append(
                {
                    "split": split,
                    "index": i,
                    "seed": p.seed,
                    "condition": p.condition,
                    "confidence_path": f"{split}/confidence.npy",
                    "label_path": f"{split}/labels.npy",
                }
            )
    d = out / "source"
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / "images.npy", np.stack([s.image for s in splits.source]))
    np.save(d / "labels.npy", np.stack([s.labels for s in splits.source]))
    for i, s in enumerate(splits.source):
        rows.append(
            {
                "split": "source",
                "index": i,
                "seed": s.seed,
                "condition": "normal",
                "confidence_path": None,
                "label_path": "source/labels.npy",
            }
        )
    manifest = {
        "schema_version": MANIFEST_VERSION,
        "seed_ranges": {k: list(v) for k, v in splits.seed_ranges.items()},
        "samples": rows,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(path: str | Path) -> DatasetSplits:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest["schema_version"] != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest schema {manifest['schema_version']!r}")
    by_split: dict[str, list[dict]] = {"train": [], "val": [], "source": []}
    for row in manifest["samples"]:
        by_split[row["split"]].append(row)

    def load_pairs(split: str) -> list[PairedSample]:
        d = root / split
        adverse = np.load(d / "adverse.npy")
        normal = np.load(d / "normal.npy")
        conf = np.load(d / "confidence.npy")
        labels = np.load(d / "labels.npy")
        return [
            PairedSample(
                adverse_image=adverse[r["index"]],
                normal_image=normal[r["index"]],
                confidence=conf[r["index"]],
                labels=labels[r["index"]],
                condition=r["condition"],
                seed=r["seed"],
            )
            for r in sorted(by_split[split], key=lambda r: r["index"])
        ]

    src_images = np.load(root / "source" / "images.npy")
    src_labels = np.load(root / "source" / "labels.npy")
    source = [
        Scene(image=src_images[r["index"]], labels=src_labels[r["index"]], seed=r["seed"])
        for r in sorted(by_split["source"], key=lambda r: r["index"])
    ]
    return DatasetSplits(
        source=source,
        train=load_pairs("train"),
        val=load_pairs("val"),
        seed_ranges={k: tuple(v) for k, v in manifest["seed_ranges"].items()},
    )
