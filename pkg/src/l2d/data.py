"""Synthetic multi-label scenes, augmentation, and dataset files.

Each scene is a pure function of ``(spec, split, index)``: a label set is
sampled, then one shape per positive class is drawn into a free cell of a
coarse placement grid, then Gaussian pixel noise is added.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

SPLITS = {"train": 0, "test": 1}
FORMAT_VERSION = 1
MAGIC = b"L2DDATA\x01"

GLYPHS = ("disc", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar")
PALETTE = (
    (0.95, 0.25, 0.20),
    (0.20, 0.70, 0.95),
    (0.95, 0.85, 0.20),
    (0.35, 0.90, 0.35),
    (0.85, 0.35, 0.90),
    (0.95, 0.60, 0.20),
    (0.90, 0.90, 0.90),
    (0.30, 0.40, 0.95),
)


class ConfigError(ValueError):
    """A scene specification cannot be realised."""


class FormatError(ValueError):
    """A dataset file is corrupt or internally inconsistent."""


@dataclass
class SceneSpec:
    num_classes: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    mean_objects: float = 2.0
    cooccurrence: list | None = None
    class_frequency: list | None = None
    noise: float = 0.05
    cell: int = 8
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def n_cells(self) -> int:
        return (self.height // self.cell) * (self.width // self.cell)

    def cooc_matrix(self) -> np.ndarray:
        q = self.num_classes
        if self.cooccurrence is None:
            return np.zeros((q, q))
        return np.asarray(self.cooccurrence, dtype=np.float64)

    def marginals(self) -> np.ndarray:
        """Target P(y_k = 1) per class; sums to ``mean_objects``."""
        q = self.num_classes
        w = np.ones(q) if self.class_frequency is None else np.asarray(self.class_frequency, dtype=np.float64)
        return self.mean_objects * w / w.sum()

    def validate(self) -> None:
        q = self.num_classes
        if q < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        if self.cell < 4 or self.height % self.cell or self.width % self.cell:
            raise ConfigError(f"cell size {self.cell} must be >= 4 and divide {self.height}x{self.width}")
        if self.mean_objects < 1:
            raise ConfigError("mean_objects must be >= 1 (every scene carries a label)")
        if self.mean_objects > min(q, self.n_cells) - 0.5:
            raise ConfigError(
                f"mean of {self.mean_objects} objects per scene does not fit {self.n_cells} cells / {q} classes")
        m = self.cooc_matrix()
        if m.shape != (q, q) or not np.allclose(m, m.T) or np.any(np.diag(m) != 0) or np.any(m < 0) or np.any(m > 1):
            raise ConfigError("cooccurrence must be a symmetric [q, q] matrix in [0, 1] with zero diagonal")
        if self.class_frequency is not None:
            w = np.asarray(self.class_frequency, dtype=np.float64)
            if w.shape != (q,) or np.any(w <= 0):
                raise ConfigError("class_frequency must be q positive weights")
        if np.any(self.marginals() >= 1):
            raise ConfigError("class_frequency puts a class marginal at or above 1")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")

    def class_names(self) -> list[str]:
        return [f"{_color_name(k)}-{GLYPHS[_glyph_of(k)]}" for k in range(self.num_classes)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)

    def key(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _glyph_of(k: int) -> int:
    return k % len(GLYPHS)


def _color_of(k: int) -> int:
    # classes 2m and 2m+1 share a colour, so colour alone never identifies a
    # class; (colour, glyph) stays unique for up to 64 classes
    return (k // len(GLYPHS) + (k % len(GLYPHS)) // 2) % len(PALETTE)


def _color_name(k: int) -> str:
    return f"c{_color_of(k)}"


# ---------------------------------------------------------------------------
# label sampling
# ---------------------------------------------------------------------------


def _solve_base(marg: np.ndarray) -> np.ndarray:
    """Independent Bernoulli rates whose draws, conditioned on >= 1 positive,
    have the given marginals.

    With p_k = pi_k * Z the conditional marginal is p_k / Z exactly when
    Z = 1 - prod(1 - pi_k Z); the nonzero root is found by bisection.
    """
    total = marg.sum()
    if abs(total - 1.0) < 1e-12:
        return np.zeros_like(marg)
    hi = min(1.0, 1.0 / marg.max())

    def g(z):
        return 1.0 - np.prod(1.0 - marg * z) - z

    lo = 1e-12
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) > 0:
            lo = mid
        else:
            hi = mid
    return marg * 0.5 * (lo + hi)


@lru_cache(maxsize=32)
def _base_rates(spec_key: str) -> np.ndarray:
    spec = SceneSpec.from_dict(json.loads(spec_key))
    target = spec.marginals()
    cooc = spec.cooc_matrix()
    if not cooc.any():
        return _solve_base(target)
    # boosts inflate the marginals; shrink the target by a common factor so
    # the mean label count still matches, using common random numbers
    rng = np.random.default_rng([spec.seed, 99])
    n = 4096
    u1 = rng.random((n, spec.num_classes))
    u2 = rng.random((n, spec.num_classes, spec.num_classes))
    order = np.argsort(rng.random((n, spec.num_classes)), axis=1)

    def mean_for(scale):
        base = _solve_base(np.minimum(target * scale, 0.999))
        counts = _draw_batch(base, cooc, u1, u2, order).sum(axis=1)
        return counts[(counts >= 1) & (counts <= spec.n_cells)].mean()

    lo, hi = 0.3, 1.0
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        if mean_for(mid) < spec.mean_objects:
            lo = mid
        else:
            hi = mid
    return _solve_base(np.minimum(target * 0.5 * (lo + hi), 0.999))


def _draw_batch(base, cooc, u1, u2, order):
    """Vectorised version of :func:`_draw_labels` over rows of pre-drawn uniforms."""
    n, q = u1.shape
    y = u1 < base
    # a positive class j switches on class k with probability cooc[j, k],
    # visiting sources in the per-row random order (one pass)
    for step in range(q):
        j = order[:, step]
        src = y[np.arange(n), j]
        turn_on = (u2[np.arange(n), j, :] < cooc[j]) & src[:, None]
        y |= turn_on
    return y.astype(np.uint8)


def _draw_labels(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    base = _base_rates(spec.key())
    cooc = spec.cooc_matrix()
    q = spec.num_classes
    single = abs(spec.marginals().sum() - 1.0) < 1e-12
    while True:
        if single:
            y = np.zeros(q, dtype=np.uint8)
            y[rng.choice(q, p=spec.marginals())] = 1
            return y
        y = rng.random(q) < base
        if cooc.any():
            u2 = rng.random((q, q))
            for j in np.argsort(rng.random(q)):
                if y[j]:
                    y |= u2[j] < cooc[j]
        count = int(y.sum())
        if 1 <= count <= spec.n_cells:
            return y.astype(np.uint8)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _glyph_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    r = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size] - r
    scale = r * rng.uniform(0.8, 1.0)
    if kind == "disc":
        return xx ** 2 + yy ** 2 <= scale ** 2
    if kind == "square":
        return (np.abs(xx) <= scale * 0.8) & (np.abs(yy) <= scale * 0.8)
    if kind == "triangle":
        return (yy >= -scale) & (yy <= scale) & (np.abs(xx) <= (yy + scale) * 0.5)
    if kind == "cross":
        w = max(scale * 0.3, 0.6)
        return ((np.abs(xx) <= w) | (np.abs(yy) <= w)) & (np.abs(xx) <= scale) & (np.abs(yy) <= scale)
    if kind == "ring":
        d = xx ** 2 + yy ** 2
        return (d <= scale ** 2) & (d >= (scale * 0.5) ** 2)
    if kind == "diamond":
        return np.abs(xx) + np.abs(yy) <= scale
    if kind == "hbar":
        return (np.abs(yy) <= max(scale * 0.35, 0.6)) & (np.abs(xx) <= scale)
    if kind == "vbar":
        return (np.abs(xx) <= max(scale * 0.35, 0.6)) & (np.abs(yy) <= scale)
    raise ValueError(kind)


def _render(spec: SceneSpec, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    H, W, C, cell = spec.height, spec.width, spec.channels, spec.cell
    img = np.empty((H, W, 3), dtype=np.float64)
    img[:] = rng.uniform(0.0, 0.25, size=3)
    cells = rng.permutation(spec.n_cells)
    per_row = W // cell
    for slot, k in zip(cells, np.flatnonzero(y)):
        size = int(rng.integers(cell - 2, cell + 1))
        cy = (slot // per_row) * cell + int(rng.integers(0, cell - size + 1))
        cx = (slot % per_row) * cell + int(rng.integers(0, cell - size + 1))
        mask = _glyph_mask(GLYPHS[_glyph_of(int(k))], size, rng)
        color = np.clip(np.asarray(PALETTE[_color_of(int(k))]) * rng.uniform(0.8, 1.1), 0, 1)
        patch = img[cy:cy + size, cx:cx + size]
        patch[mask] = color
    img += rng.normal(0.0, spec.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    if C == 1:
        img = img.mean(axis=2, keepdims=True)
    return img.astype(np.float32)


def example_rng(spec: SceneSpec, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed & 0xFFFFFFFF, SPLITS[split], int(index)])


def generate_example(spec: SceneSpec, split: str, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic ``(grid [H, W, C], labels [q])`` for one scene."""
    rng = example_rng(spec, split, index)
    y = _draw_labels(spec, rng)
    return _render(spec, y, rng), y


def sample_labels(spec: SceneSpec, n: int, split: str = "train") -> np.ndarray:
    """Label vectors of the first ``n`` scenes without rendering them."""
    return np.stack([_draw_labels(spec, example_rng(spec, split, i)) for i in range(n)])


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    x: np.ndarray                     # [n, H, W, C] float32
    y: np.ndarray                     # [n, q] uint8
    spec: SceneSpec
    split: str = "train"
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.class_names:
            self.class_names = self.spec.class_names()

    def __len__(self) -> int:
        return len(self.y)

    @property
    def num_classes(self) -> int:
        return self.y.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.spec, self.split, list(self.class_names))

    def __eq__(self, other) -> bool:
        return (isinstance(other, Dataset) and self.split == other.split
                and self.spec == other.spec and self.class_names == other.class_names
                and np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y))


def build_split(spec: SceneSpec, split: str, n: int) -> Dataset:
    xs = np.empty((n, spec.height, spec.width, spec.channels), dtype=np.float32)
    ys = np.empty((n, spec.num_classes), dtype=np.uint8)
    for i in range(n):
        xs[i], ys[i] = generate_example(spec, split, i)
    return Dataset(xs, ys, spec, split)


def generate_dataset(spec: SceneSpec, n_train: int, n_test: int) -> tuple[Dataset, Dataset]:
    spec.validate()
    return build_split(spec, "train", n_train), build_split(spec, "test", n_test)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def hflip(x: np.ndarray) -> np.ndarray:
    return x[..., :, ::-1, :].copy()


def cutout(x: np.ndarray, top: int, left: int, side: int) -> np.ndarray:
    out = x.copy()
    out[..., top:top + side, left:left + side, :] = 0.0
    return out


def augment(x: np.ndarray, mode: str, rng: np.random.Generator, log: dict | None = None) -> np.ndarray:
    """Augment one grid [H, W, C].

    ``weak``: horizontal flip with p = 0.5.  ``strong``: flip, one of
    brightness shift / channel scale / small translation, then Cutout of one
    ceil(H/4) square.  ``none`` returns the input.  Labels are never touched.
    """
    if mode == "none":
        return x
    if mode not in ("weak", "strong"):
        raise ValueError(f"unknown augmentation mode {mode!r}")
    H, W, C = x.shape
    flip = bool(rng.random() < 0.5)
    out = hflip(x) if flip else x
    if log is not None:
        log["flip"] = flip
    if mode == "weak":
        return out
    op = int(rng.integers(0, 3))
    if op == 0:
        out = np.clip(out + rng.uniform(-0.15, 0.15), 0.0, 1.0)
    elif op == 1:
        out = np.clip(out * rng.uniform(0.7, 1.3, size=C), 0.0, 1.0)
    else:
        dy, dx = (int(v) for v in rng.integers(-2, 3, size=2))
        out = np.roll(out, (dy, dx), axis=(0, 1))
    # cutout last so the erased square stays exactly zero
    side = math.ceil(H / 4)
    top = int(rng.integers(0, H - side + 1))
    left = int(rng.integers(0, W - side + 1))
    out = cutout(out, top, left, side)
    if log is not None:
        log.update(cutout=(top, left, side), transform=("brightness", "channel_scale", "translate")[op])
    return out.astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_dataset(ds: Dataset, path) -> None:
    """Write magic, header length, JSON manifest, float32 grids, packed labels."""
    n = len(ds)
    q = ds.num_classes
    grids = np.ascontiguousarray(ds.x, dtype="<f4").tobytes()
    labels = np.packbits(ds.y.astype(np.uint8), axis=1).tobytes()
    manifest = {
        "format_version": FORMAT_VERSION,
        "split": ds.split,
        "count": n,
        "grid_shape": list(ds.x.shape[1:]),
        "num_classes": q,
        "class_names": ds.class_names,
        "spec": ds.spec.to_dict(),
        "grid_bytes": len(grids),
        "label_bytes": len(labels),
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(grids)
        fh.write(labels)


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise FormatError("bad magic at byte offset 0")
    off = len(MAGIC)
    if len(raw) < off + 8:
        raise FormatError(f"truncated header length at byte offset {off}")
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if len(raw) < off + hlen:
        raise FormatError(f"truncated manifest at byte offset {off}")
    try:
        man = json.loads(raw[off:off + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt manifest at byte offset {off}: {exc}") from exc
    off += hlen
    if man.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {man.get('format_version')!r}")
    n, q = man["count"], man["num_classes"]
    shape = tuple(man["grid_shape"])
    if len(man["class_names"]) != q:
        raise FormatError(f"manifest lists {len(man['class_names'])} class names but {q} label columns")
    if man["spec"].get("num_classes") != q:
        raise FormatError("manifest spec class count differs from label width")
    grid_bytes = 4 * n * int(np.prod(shape))
    label_bytes = n * ((q + 7) // 8)
    if man["grid_bytes"] != grid_bytes or man["label_bytes"] != label_bytes:
        raise FormatError(f"manifest block sizes inconsistent with count/shape at byte offset {off}")
    if len(raw) != off + grid_bytes + label_bytes:
        raise FormatError(f"payload length mismatch: expected {off + grid_bytes + label_bytes} bytes, "
                          f"file has {len(raw)} (data starts at byte offset {off})")
    x = np.frombuffer(raw, dtype="<f4", count=n * int(np.prod(shape)), offset=off).reshape((n,) + shape)
    packed = np.frombuffer(raw, dtype=np.uint8, count=label_bytes, offset=off + grid_bytes).reshape(n, -1)
    y = np.unpackbits(packed, axis=1, count=q)
    try:
        spec = SceneSpec.from_dict(man["spec"])
    except (TypeError, ConfigError) as exc:
        raise FormatError(f"manifest spec invalid: {exc}") from exc
    return Dataset(x.astype(np.float32), y.astype(np.uint8), spec, man["split"], list(man["class_names"]))
