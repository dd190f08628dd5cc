"""Synthetic shape-segmentation data and 1-way K-shot episodes.

Every class is one shape family with its own intensity and texture
signature.  Images carry 0-2 distractor objects drawn from other classes;
the mask marks only the target object, so a model has to use the support
set to decide which object to segment.
"""
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numcore.rng import Rng
from .numcore.tensorio import load_tensor, save_tensor

DATASET_VERSION = 1
FAMILIES = (
    "circle", "square", "triangle", "cross", "ring", "bar",
    "ellipse", "lshape", "diamond", "star", "hexagon", "crescent",
    "semicircle", "plus_ring", "trapezoid", "arrow",
)
TEXTURES = ("flat", "hstripes", "vstripes", "checker")
FG_RANGE = (0.02, 0.60)
NOISE_STD = 0.1
SCALE_RANGE = (0.5, 1.5)
NUM_FOLDS = 4


class GenerationError(RuntimeError):
    pass


@dataclass
class ShapeClass:
    id: int
    family: str
    intensity: float
    texture: str
    texture_period: float
    texture_amp: float

    def params(self):
        return {"intensity": self.intensity, "texture": self.texture,
                "texture_period": self.texture_period, "texture_amp": self.texture_amp}


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 1) in [0, 1]
    mask: np.ndarray  # (H, W) in {0, 1}
    class_id: int
    index: int = -1


@dataclass
class Episode:
    query: Sample
    support: list
    class_id: int

    @property
    def k(self):
        return len(self.support)


@dataclass
class FoldSplit:
    fold: int
    train_classes: list
    test_classes: list


# ------------------------------------------------------------------ shapes


def _inside(family, u, v):
    r = np.hypot(u, v)
    th = np.arctan2(v, u)
    if family == "circle":
        return r <= 1.0
    if family == "square":
        return np.maximum(abs(u), abs(v)) <= 0.8
    if family == "triangle":
        return (v <= 0.5) & (v >= 1.732 * u - 1.0) & (v >= -1.732 * u - 1.0)
    if family == "cross":
        return ((abs(u) <= 0.3) & (abs(v) <= 1.0)) | ((abs(v) <= 0.3) & (abs(u) <= 1.0))
    if family == "ring":
        return (r <= 1.0) & (r >= 0.55)
    if family == "bar":
        return (abs(u) <= 1.0) & (abs(v) <= 0.3)
    if family == "ellipse":
        return u ** 2 + (v / 0.55) ** 2 <= 1.0
    if family == "lshape":
        return (((u >= -0.8) & (u <= 0.8) & (v >= 0.35) & (v <= 0.8))
                | ((u >= -0.8) & (u <= -0.35) & (v >= -0.8) & (v <= 0.8)))
    if family == "diamond":
        return abs(u) + abs(v) <= 1.0
    if family == "star":
        return r <= 0.55 + 0.4 * np.cos(5 * th)
    if family == "hexagon":
        return np.maximum(abs(v), 0.5 * abs(v) + 0.866 * abs(u)) <= 0.9
    if family == "crescent":
        return (r <= 1.0) & (np.hypot(u - 0.5, v) > 0.75)
    if family == "semicircle":
        return (r <= 1.0) & (v >= -0.2)
    if family == "plus_ring":
        return (r <= 1.0) & ((r >= 0.7) | (abs(u) <= 0.2) | (abs(v) <= 0.2))
    if family == "trapezoid":
        return (abs(v) <= 0.6) & (abs(u) <= 0.55 + 0.4 * (v + 0.6) / 1.2)
    if family == "arrow":
        return (((abs(v) <= 0.25) & (u >= -1.0) & (u <= 0.2))
                | ((u >= 0.2) & (u <= 1.0) & (abs(v) <= 1.0 - u)))
    raise ValueError(f"unknown shape family {family!r}")


def render_shape(family, size, center, radius, angle):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - center[1], yy - center[0]
    c, s = np.cos(angle), np.sin(angle)
    u = (c * dx + s * dy) / radius
    v = (-s * dx + c * dy) / radius
    return _inside(family, u, v), u, v


def _texture(cls, u, v):
    if cls.texture == "flat":
        return np.zeros_like(u)
    # period is in pixels, texture coordinates live in the shape frame
    k = 2 * np.pi / cls.texture_period
    if cls.texture == "hstripes":
        return np.sign(np.sin(k * v))
    if cls.texture == "vstripes":
        return np.sign(np.sin(k * u))
    return np.sign(np.sin(k * u) * np.sin(k * v))


def make_classes(num_classes, seed):
    if num_classes > len(FAMILIES):
        raise GenerationError(f"at most {len(FAMILIES)} classes supported, asked for {num_classes}")
    rng = Rng(seed)
    levels = np.linspace(0.4, 0.95, num_classes)[rng.permutation(num_classes)]
    classes = []
    for cid in range(num_classes):
        classes.append(ShapeClass(
            id=cid,
            family=FAMILIES[cid],
            intensity=round(float(levels[cid]), 4),
            texture=TEXTURES[cid % len(TEXTURES)],
            texture_period=4.0 + 2.0 * ((cid // len(TEXTURES)) % 3),
            texture_amp=0.12,
        ))
    return classes


def _place(rng, size, base_radius, scale):
    radius = base_radius * scale
    lo, hi = radius * 0.6, size - radius * 0.6
    if lo >= hi:
        raise GenerationError(f"shape radius {radius:.1f} too large for a {size}px canvas")
    center = rng.uniform(lo, hi, size=2)
    angle = rng.uniform(0.0, 2 * np.pi)
    return center, radius, angle


def _paint(canvas, cls, mask, u, v, rng):
    # u, v in pixels along the shape's rotated axes
    level = cls.intensity + rng.uniform(-0.05, 0.05)
    canvas[mask] = (level + cls.texture_amp * _texture(cls, u, v))[mask]


def render_sample(cls, classes, size, rng, max_tries=200):
    """One (image, mask) pair for ``cls`` with up to two distractors."""
    base_radius = 0.2 * size
    for _ in range(max_tries):
        center, radius, angle = _place(rng, size, base_radius, rng.uniform(*SCALE_RANGE))
        mask, u, v = render_shape(cls.family, size, center, radius, angle)
        frac = mask.mean()
        if FG_RANGE[0] <= frac <= FG_RANGE[1]:
            break
    else:
        raise GenerationError(f"could not satisfy foreground range for class {cls.id}")

    canvas = np.full((size, size), rng.uniform(0.0, 0.25))
    n_distract = int(rng.integers(0, 3))
    others = [c for c in classes if c.id != cls.id]
    keep_out = _dilate(mask, 2)
    for _ in range(n_distract):
        other = others[int(rng.integers(0, len(others)))]
        for _ in range(20):
            c2, r2, a2 = _place(rng, size, base_radius, rng.uniform(*SCALE_RANGE))
            m2, u2, v2 = render_shape(other.family, size, c2, r2, a2)
            if m2.any() and not (m2 & keep_out).any():
                _paint(canvas, other, m2, u2 * r2, v2 * r2, rng)
                keep_out |= _dilate(m2, 2)
                break
    _paint(canvas, cls, mask, u * radius, v * radius, rng)
    canvas = canvas + NOISE_STD * rng.normal((size, size))
    image = np.clip(canvas, 0.0, 1.0).astype(np.float32)[..., None]
    return image, mask.astype(np.float32)


def _dilate(mask, steps):
    out = mask.copy()
    for _ in range(steps):
        grown = out.copy()
        grown[1:] |= out[:-1]
        grown[:-1] |= out[1:]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def class_seed(seed, cid):
    return int(np.random.SeedSequence([int(seed), int(cid)]).generate_state(1, np.uint64)[0])


class Dataset:
    """In-memory dataset: images (n_cls, n, H, W, 1), masks (n_cls, n, H, W)."""

    def __init__(self, images, masks, classes, seed=0, root=None):
        self.images = np.asarray(images, dtype=np.float32)
        self.masks = np.asarray(masks, dtype=np.float32)
        self.classes = list(classes)
        self.seed = seed
        self.root = root

    @property
    def num_classes(self):
        return self.images.shape[0]

    @property
    def samples_per_class(self):
        return self.images.shape[1]

    @property
    def image_size(self):
        return self.images.shape[2]

    def sample(self, cid, k):
        return Sample(self.images[cid, k], self.masks[cid, k], cid, k)

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.masks.tobytes())
        return h.hexdigest()


def build_dataset(num_classes=12, samples_per_class=200, image_size=64, seed=0):
    """Generate the whole dataset in memory."""
    if num_classes < 2 * NUM_FOLDS:
        raise GenerationError(f"need at least {2 * NUM_FOLDS} classes for {NUM_FOLDS} folds")
    classes = make_classes(num_classes, seed)
    images = np.empty((num_classes, samples_per_class, image_size, image_size, 1), np.float32)
    masks = np.empty((num_classes, samples_per_class, image_size, image_size), np.float32)
    for cls in classes:
        rng = Rng(class_seed(seed, cls.id))
        for k in range(samples_per_class):
            images[cls.id, k], masks[cls.id, k] = render_sample(cls, classes, image_size, rng)
    return Dataset(images, masks, classes, seed)


def manifest_for(ds):
    n = ds.num_classes
    return {
        "version": DATASET_VERSION,
        "seed": ds.seed,
        "image_size": ds.image_size,
        "classes": [{"id": c.id, "family": c.family, "params": c.params()} for c in ds.classes],
        "folds": [fold_split(n, i).test_classes for i in range(NUM_FOLDS)],
        "samples_per_class": ds.samples_per_class,
    }


def generate_dataset(out, num_classes=12, samples_per_class=200, image_size=64, seed=0):
    """Write per-sample tensor files and ``dataset.json`` under ``out``."""
    ds = build_dataset(num_classes, samples_per_class, image_size, seed)
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    for cid in range(num_classes):
        cdir = root / f"class_{cid}"
        cdir.mkdir(exist_ok=True)
        for k in range(samples_per_class):
            save_tensor(cdir / f"sample_{k}.img.t", ds.images[cid, k])
            save_tensor(cdir / f"sample_{k}.mask.t", ds.masks[cid, k])
    (root / "dataset.json").write_text(json.dumps(manifest_for(ds), indent=2) + "\n")
    ds.root = root
    return ds


def load_dataset(path):
    root = Path(path)
    meta_path = root / "dataset.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no dataset.json under {root}")
    meta = json.loads(meta_path.read_text())
    n, spc, size = len(meta["classes"]), meta["samples_per_class"], meta["image_size"]
    images = np.empty((n, spc, size, size, 1), np.float32)
    masks = np.empty((n, spc, size, size), np.float32)
    for cid in range(n):
        for k in range(spc):
            images[cid, k] = load_tensor(root / f"class_{cid}" / f"sample_{k}.img.t")
            masks[cid, k] = load_tensor(root / f"class_{cid}" / f"sample_{k}.mask.t")
    classes = [ShapeClass(id=c["id"], family=c["family"], **c["params"]) for c in meta["classes"]]
    return Dataset(images, masks, classes, meta["seed"], root)


# ------------------------------------------------------------ folds/episodes


def fold_split(num_classes, fold):
    if fold not in range(NUM_FOLDS):
        raise ValueError(f"fold must be in 0..{NUM_FOLDS - 1}, got {fold}")
    if num_classes % NUM_FOLDS:
        raise ValueError(f"{num_classes} classes cannot be split evenly into {NUM_FOLDS} folds")
    per = num_classes // NUM_FOLDS
    test = list(range(fold * per, (fold + 1) * per))
    train = [c for c in range(num_classes) if c not in test]
    return FoldSplit(fold, train, test)


def sample_episode(dataset, class_pool, k, rng, feature_size=None, max_tries=100):
    """Uniform class from ``class_pool``, then k+1 distinct samples; the first is the query.

    With ``feature_size`` set, draws whose support masks vanish after
    nearest-neighbour downsampling to that size are rejected and redrawn.
    """
    pool = list(class_pool)
    if not pool:
        raise ValueError("empty class pool")
    if dataset.samples_per_class < k + 1:
        raise ValueError(f"class has {dataset.samples_per_class} samples, episode needs {k + 1}")
    for _ in range(max_tries):
        cid = pool[int(rng.integers(0, len(pool)))]
        idx = rng.choice(dataset.samples_per_class, k + 1, replace=False)
        ep = Episode(dataset.sample(cid, int(idx[0])), [dataset.sample(cid, int(i)) for i in idx[1:]], cid)
        if feature_size is None or _supports_visible(ep, feature_size):
            return ep
    raise RuntimeError("could not draw an episode with visible support foreground")


def _supports_visible(ep, feature_size):
    from .memory import downsample_mask

    return all(downsample_mask(s.mask, feature_size).any() for s in ep.support)
