"""Synthetic class-imbalanced segmentation datasets and their on-disk format.

A dataset directory holds ``manifest.json`` plus ``img_%04d.ppm`` (binary P6,
maxval 255) and ``lbl_%04d.pgm`` (binary P5, gray value = class index, 255 =
ignore). Sample paths in the manifest are relative to the manifest's directory.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .numerics import IGNORE_INDEX

LABELED = "labeled-train"
UNLABELED = "unlabeled-train"
TEST = "test"
SPLITS = (LABELED, UNLABELED, TEST)

# pixel ratios measured on the real datasets (background first)
CHASE_RATIOS = (0.9336, 0.0664)
CHASE_CLASSES = ("background", "retinal vessel")
COVID_RATIOS = (0.9324, 0.0214, 0.0450, 0.0012)
COVID_CLASSES = ("background", "ground-glass", "consolidation", "pleural effusions")

VESSEL_TOLERANCE = 0.02  # absolute, per sample
BLOB_TOLERANCE = 0.20  # relative, dataset mean
MAX_ATTEMPTS = 100


class GenerationError(RuntimeError):
    pass


class FormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.offset = offset


@dataclass
class SyntheticSpec:
    name: str
    style: str  # "vessel" or "blob"
    ratios: tuple[float, ...]
    image_size: int = 64
    n_train: int = 64
    n_test: int = 8
    seed: int = 0
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        if self.style not in ("vessel", "blob"):
            raise ValueError(f"unknown style {self.style!r}; expected 'vessel' or 'blob'")
        if any(r <= 0 for r in self.ratios):
            raise ValueError("class ratios must be positive")
        if abs(sum(self.ratios) - 1.0) > 1e-6:
            raise ValueError(f"class ratios sum to {sum(self.ratios):.6f}, expected 1")
        if self.style == "vessel" and len(self.ratios) != 2:
            raise ValueError("vessel style needs exactly 2 classes")
        if self.style == "blob" and len(self.ratios) < 3:
            raise ValueError("blob style needs at least 3 classes")
        if not self.class_names:
            self.class_names = tuple(f"class{i}" for i in range(len(self.ratios)))
        self.class_names = tuple(self.class_names)
        if len(self.class_names) != len(self.ratios):
            raise ValueError("class_names and ratios differ in length")
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by 8")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown dataset spec keys: {sorted(unknown)}")
        return cls(**d)


def chase_like(**kw) -> SyntheticSpec:
    kw.setdefault("name", "chase-like")
    return SyntheticSpec(style="vessel", ratios=CHASE_RATIOS, class_names=CHASE_CLASSES, **kw)


def covid_like(**kw) -> SyntheticSpec:
    kw.setdefault("name", "covid-like")
    return SyntheticSpec(style="blob", ratios=COVID_RATIOS, class_names=COVID_CLASSES, **kw)


@dataclass
class Sample:
    image: str
    label: str
    split: str
    index: int
    image_sha256: str = ""
    label_sha256: str = ""


@dataclass
class DatasetManifest:
    name: str
    num_classes: int
    class_names: list[str]
    image_size: int
    seed: int
    samples: list[Sample]
    spec: dict = field(default_factory=dict)
    achieved_ratios: list[float] = field(default_factory=list)
    labeled_ratio: float | None = None
    split_seed: int | None = None
    root: Path | None = None

    def by_split(self, split: str) -> list[Sample]:
        return [s for s in self.samples if s.split == split]

    def path(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("root")
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def save(self, path: str | os.PathLike) -> None:
        _atomic_write(Path(path), self.to_json().encode())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        d = json.loads(path.read_text())
        d["samples"] = [Sample(**s) for s in d["samples"]]
        m = cls(**d)
        m.root = path.parent
        for s in m.samples:
            if s.split not in SPLITS:
                raise ValueError(f"sample {s.index}: unknown split tag {s.split!r}")
        return m


# --------------------------------------------------------------------------- io


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    c, h, w = image.shape
    if c != 3:
        raise ValueError(f"PPM needs 3 channels, got {c}")
    raster = np.ascontiguousarray(np.moveaxis(_quantize(image), 0, -1))
    return f"P6\n{w} {h}\n255\n".encode() + raster.tobytes()


def encode_pgm(label: np.ndarray) -> bytes:
    h, w = label.shape
    lbl = np.asarray(label)
    if lbl.min() < 0 or lbl.max() > 255:
        raise ValueError("label values must fit in 0..255")
    return f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(lbl.astype(np.uint8)).tobytes()


def _parse_netpbm(buf: bytes, magic: bytes, path) -> tuple[int, int, int]:
    """Return (width, height, raster offset)."""
    if buf[:2] != magic:
        raise FormatError(path, 0, f"expected magic {magic.decode()}, found {buf[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(buf):
            raise FormatError(path, pos, "header ends before width/height/maxval")
        ch = buf[pos : pos + 1]
        if ch == b"#":
            nl = buf.find(b"\n", pos)
            if nl < 0:
                raise FormatError(path, pos, "unterminated comment")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(buf) and buf[pos : pos + 1].isdigit():
                pos += 1
            fields.append((int(buf[start:pos]), start))
        else:
            raise FormatError(path, pos, f"unexpected byte {ch!r} in header")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError(path, pos, "missing whitespace after maxval")
    (w, _), (h, _), (maxval, mpos) = fields
    if maxval != 255:
        raise FormatError(path, mpos, f"maxval {maxval} unsupported (need 255)")
    if w <= 0 or h <= 0:
        raise FormatError(path, fields[0][1], "non-positive extent")
    return w, h, pos + 1


def decode_ppm(buf: bytes, path="<bytes>") -> np.ndarray:
    w, h, off = _parse_netpbm(buf, b"P6", path)
    need = off + 3 * w * h
    if len(buf) < need:
        raise FormatError(path, len(buf), f"truncated raster: {len(buf) - off} of {3 * w * h} bytes")
    if len(buf) > need:
        raise FormatError(path, need, "trailing bytes after raster")
    raster = np.frombuffer(buf, dtype=np.uint8, count=3 * w * h, offset=off).reshape(h, w, 3)
    return np.moveaxis(raster, -1, 0).astype(np.float32) / 255.0


def decode_pgm(buf: bytes, path="<bytes>") -> np.ndarray:
    w, h, off = _parse_netpbm(buf, b"P5", path)
    need = off + w * h
    if len(buf) < need:
        raise FormatError(path, len(buf), f"truncated raster: {len(buf) - off} of {w * h} bytes")
    if len(buf) > need:
        raise FormatError(path, need, "trailing bytes after raster")
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=off).reshape(h, w).copy()


def write_sample(image_path, label_path, image: np.ndarray, label: np.ndarray) -> tuple[str, str]:
    """Write both files atomically; returns their sha256 digests."""
    img_bytes, lbl_bytes = encode_ppm(image), encode_pgm(label)
    _atomic_write(Path(image_path), img_bytes)
    _atomic_write(Path(label_path), lbl_bytes)
    return hashlib.sha256(img_bytes).hexdigest(), hashlib.sha256(lbl_bytes).hexdigest()


def read_sample(image_path, label_path, expected_size: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    image = decode_ppm(Path(image_path).read_bytes(), image_path)
    label = decode_pgm(Path(label_path).read_bytes(), label_path)
    if image.shape[1:] != label.shape:
        raise FormatError(label_path, 0, f"label extent {label.shape} != image extent {image.shape[1:]}")
    if expected_size is not None and label.shape != (expected_size, expected_size):
        raise FormatError(image_path, 0, f"extent {label.shape} != manifest size {expected_size}")
    return image, label


def load_split(manifest: DatasetManifest, split: str) -> tuple[list[np.ndarray], list[np.ndarray]]:
    images, labels = [], []
    for s in manifest.by_split(split):
        img, lbl = read_sample(manifest.path(s.image), manifest.path(s.label), manifest.image_size)
        images.append(img)
        labels.append(lbl)
    return images, labels


# -------------------------------------------------------------------- rendering


def _smooth_noise(rng, size: int, sigma: float) -> np.ndarray:
    field_ = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def _stamp_polyline(canvas: np.ndarray, pts: np.ndarray, radius: float) -> None:
    h, w = canvas.shape
    r = int(math.ceil(radius))
    for y, x in pts:
        y0, x0 = int(round(y)), int(round(x))
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                if dy * dy + dx * dx <= radius * radius:
                    yy, xx = y0 + dy, x0 + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        canvas[yy, xx] = 1


def _random_vessel(rng, size: int) -> tuple[np.ndarray, float]:
    """Smooth random-walk polyline entering from a border, plus its stroke radius."""
    side = rng.integers(4)
    t = rng.uniform(0, size)
    start = [(0.0, t), (size - 1.0, t), (t, 0.0), (t, size - 1.0)][side]
    heading = [math.pi / 2, -math.pi / 2, 0.0, math.pi][side] + rng.uniform(-0.6, 0.6)
    # y grows downward: heading 0 points +x, pi/2 points +y
    length = int(rng.integers(size // 3, int(size * 1.2)))
    curvature = 0.0
    y, x = start
    pts = []
    for _ in range(length):
        pts.append((y, x))
        curvature = 0.85 * curvature + rng.normal(0, 0.05)
        heading += curvature
        y += 0.7 * math.sin(heading)
        x += 0.7 * math.cos(heading)
        if not (-2 <= y <= size + 1 and -2 <= x <= size + 1):
            break
    width = rng.uniform(1.0, 3.0)  # stroke width in px
    return np.array(pts), width / 2.0


def render_vessel_label(rng, size: int, target: float, index: int) -> np.ndarray:
    lo, hi = target - VESSEL_TOLERANCE, target + VESSEL_TOLERANCE
    label = np.zeros((size, size), np.uint8)
    attempts = 0
    while True:
        frac = label.mean()
        if target - VESSEL_TOLERANCE / 2 <= frac <= hi:
            return label
        if attempts >= MAX_ATTEMPTS:
            raise GenerationError(
                f"sample {index}: foreground ratio {frac:.4f} not within {target:.4f} +/- {VESSEL_TOLERANCE}"
            )
        attempts += 1
        pts, radius = _random_vessel(rng, size)
        trial = label.copy()
        _stamp_polyline(trial, pts, radius)
        if trial.mean() <= hi:
            label = trial


def render_vessel_image(rng, label: np.ndarray) -> np.ndarray:
    size = label.shape[0]
    illum = 0.5 + 0.12 * _smooth_noise(rng, size, size / 6)
    texture = 0.05 * _smooth_noise(rng, size, 1.5)
    base = np.array([0.85, 0.42, 0.22])[:, None, None] * (illum + texture)[None]
    contrast = rng.uniform(0.45, 0.75)
    vessel = gaussian_filter(label.astype(np.float64), 0.6)
    img = base * (1.0 - contrast * vessel)[None]
    img = img + rng.normal(0, 0.04, img.shape)
    img = _acquisition(rng, np.clip(img, 0.0, 1.0))
    return np.clip(img, 0.0, 1.0)


def _acquisition(rng, img: np.ndarray) -> np.ndarray:
    """Per-image exposure, colour cast and gamma, as between fundus camera sessions."""
    gain = rng.uniform(0.55, 1.45)
    cast = rng.uniform(0.75, 1.25, size=3)[:, None, None]
    gamma = rng.uniform(0.7, 1.4)
    return np.clip(img * gain * cast, 0.0, 1.0) ** gamma


def _blob_mask(rng, size: int, area: float) -> np.ndarray:
    """Amoeboid blob of roughly ``area`` pixels at a random centre."""
    r0 = math.sqrt(max(area, 1.0) / math.pi)
    cy, cx = rng.uniform(0, size, 2)
    aspect = rng.uniform(0.6, 1.6)
    rot = rng.uniform(0, math.pi)
    k = int(rng.integers(2, 6))
    phase = rng.uniform(0, 2 * math.pi)
    wobble = rng.uniform(0.05, 0.25)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(rot) + dy * math.sin(rot)
    v = -dx * math.sin(rot) + dy * math.cos(rot)
    ang = np.arctan2(v, u)
    rad = np.hypot(u / math.sqrt(aspect), v * math.sqrt(aspect))
    return rad <= r0 * (1.0 + wobble * np.sin(k * ang + phase))


def render_blob_label(rng, size: int, targets: dict[int, float], index: int) -> np.ndarray:
    """Fill each class up to its pixel target, painting only over background."""
    label = np.zeros((size, size), np.uint8)
    for cls, want in sorted(targets.items(), key=lambda kv: -kv[1]):
        if want <= 0:
            continue
        lo, hi = 0.85 * want, 1.15 * want + 2
        attempts = 0
        while (label == cls).sum() < lo:
            if attempts >= MAX_ATTEMPTS:
                raise GenerationError(f"sample {index}: class {cls} stuck below {lo:.1f} px")
            attempts += 1
            have = int((label == cls).sum())
            area = min(want - have, want / rng.uniform(1.0, 3.0)) * 1.1
            blob = _blob_mask(rng, size, max(area, 3.0)) & (label == 0)
            if have + blob.sum() <= hi and blob.any():
                label[blob] = cls
    return label


_BLOB_INTENSITY = [0.0, 0.18, 0.42, 0.3]
_BLOB_TINT = [(1.0, 1.0, 1.0), (0.9, 1.0, 1.15), (1.1, 1.0, 0.9), (1.0, 1.2, 1.0)]


def render_blob_image(rng, label: np.ndarray) -> np.ndarray:
    size = label.shape[0]
    base = 0.3 + 0.08 * _smooth_noise(rng, size, size / 8)
    img = np.repeat(base[None], 3, axis=0)
    for cls in range(1, int(label.max()) + 1):
        m = gaussian_filter((label == cls).astype(np.float64), 0.8 if cls == 1 else 0.4)
        lift = _BLOB_INTENSITY[cls % len(_BLOB_INTENSITY)]
        tint = np.array(_BLOB_TINT[cls % len(_BLOB_TINT)])[:, None, None]
        img = img + lift * tint * m[None]
    img = img + rng.normal(0, 0.04, img.shape)
    return np.clip(img, 0.0, 1.0)


def class_ratios(labels: list[np.ndarray], num_classes: int) -> list[float]:
    counts = np.zeros(num_classes, np.int64)
    for lbl in labels:
        counts += np.bincount(lbl[lbl != IGNORE_INDEX].ravel(), minlength=num_classes)[:num_classes]
    return (counts / max(counts.sum(), 1)).tolist()


def _blob_targets(spec: SyntheticSpec, n: int, rng) -> list[dict[int, float]]:
    """Per-sample pixel targets whose dataset mean hits the target ratios."""
    hw = spec.image_size**2
    per_sample = [dict() for _ in range(n)]
    for cls, ratio in enumerate(spec.ratios[1:], start=1):
        if ratio < 0.01:
            k = max(1, min(n - 1, int(round(0.3 * n)))) if n > 1 else 1
            hosts = set(rng.permutation(n)[:k].tolist())
        else:
            hosts = set(range(n))
        jitter = rng.uniform(0.6, 1.4, n)
        jitter = jitter / np.mean([jitter[i] for i in hosts])
        for i in range(n):
            per_sample[i][cls] = ratio * hw * n / len(hosts) * jitter[i] if i in hosts else 0.0
    return per_sample


def generate_dataset(spec: SyntheticSpec, out_dir: str | os.PathLike) -> DatasetManifest:
    """Render every sample under per-index RNG substreams and write the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = spec.n_train + spec.n_test
    size = spec.image_size
    targets = _blob_targets(spec, n, np.random.default_rng([spec.seed, 1_000_003])) if spec.style == "blob" else None

    samples, labels = [], []
    for i in range(n):
        rng = np.random.default_rng([spec.seed, i])
        if spec.style == "vessel":
            label = render_vessel_label(rng, size, spec.ratios[1], i)
            image = render_vessel_image(rng, label)
        else:
            label = render_blob_label(rng, size, targets[i], i)
            image = render_blob_image(rng, label)
        img_name, lbl_name = f"img_{i:04d}.ppm", f"lbl_{i:04d}.pgm"
        h_img, h_lbl = write_sample(out / img_name, out / lbl_name, image, label)
        split = UNLABELED if i < spec.n_train else TEST
        samples.append(Sample(img_name, lbl_name, split, i, h_img, h_lbl))
        labels.append(label)

    manifest = DatasetManifest(
        name=spec.name,
        num_classes=len(spec.ratios),
        class_names=list(spec.class_names),
        image_size=size,
        seed=spec.seed,
        samples=samples,
        spec=asdict(spec),
        achieved_ratios=class_ratios(labels, len(spec.ratios)),
        root=out,
    )
    manifest.save(out / "manifest.json")
    return manifest


def generate_vessel_dataset(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    if spec.style != "vessel":
        raise ValueError("generate_vessel_dataset needs style='vessel'")
    return generate_dataset(spec, out_dir)


def generate_blob_dataset(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    if spec.style != "blob":
        raise ValueError("generate_blob_dataset needs style='blob'")
    return generate_dataset(spec, out_dir)


def labeled_count(n_train: int, ratio: float) -> int:
    return min(n_train, max(1, math.floor(n_train * ratio + 1e-9)))


def split_dataset(manifest: DatasetManifest, labeled_ratio: float, seed: int) -> DatasetManifest:
    """Tag floor(n_train * ratio) (at least 1) train samples as labeled, the rest unlabeled."""
    if not 0.0 < labeled_ratio <= 1.0:
        raise ValueError(f"labeled_ratio must lie in (0, 1], got {labeled_ratio}")
    train = [s for s in manifest.samples if s.split in (LABELED, UNLABELED)]
    if not train:
        raise ValueError("manifest has no training samples")
    k = labeled_count(len(train), labeled_ratio)
    chosen = set(np.random.default_rng(seed).permutation(len(train))[:k].tolist())
    chosen_idx = {train[i].index for i in chosen}
    samples = []
    for s in manifest.samples:
        if s.split == TEST:
            samples.append(Sample(**asdict(s)))
        else:
            tag = LABELED if s.index in chosen_idx else UNLABELED
            samples.append(Sample(**{**asdict(s), "split": tag}))
    out = DatasetManifest(**{**{k_: getattr(manifest, k_) for k_ in manifest.__dataclass_fields__}, "samples": samples})
    out.labeled_ratio = labeled_ratio
    out.split_seed = seed
    return out
