"""Synthetic crack images, dataset splits and PNG/PGM I/O."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw, ImageFilter, UnidentifiedImageError

from .exceptions import ConfigError, ImageIOError

SPLIT_NAMES = ("train", "val", "test")


@dataclass
class SegSample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    mask: np.ndarray  # [1, H, W] float32 in {0, 1}
    id: str


@dataclass
class CrackSpec:
    seed: int = 0
    n_cracks: int = 2
    width_range: Tuple[float, float] = (2.0, 4.0)
    branch_prob: float = 0.04
    curvature: float = 0.25
    noise: float = 0.03
    texture_scale: float = 8.0
    contrast: Tuple[float, float] = (0.5, 0.8)

    def validate(self) -> "CrackSpec":
        lo, hi = self.width_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"width range must satisfy 1 <= lo <= hi, got {self.width_range}")
        if not 0.0 <= self.branch_prob <= 1.0:
            raise ConfigError(f"branch_prob must lie in [0, 1], got {self.branch_prob}")
        if self.n_cracks < 0:
            raise ConfigError("n_cracks must be >= 0")
        if self.noise < 0 or self.curvature < 0 or self.texture_scale <= 0:
            raise ConfigError("noise and curvature must be >= 0, texture_scale > 0")
        c_lo, c_hi = self.contrast
        if not 0.0 <= c_lo <= c_hi <= 1.0:
            raise ConfigError(f"contrast must satisfy 0 <= lo <= hi <= 1, got {self.contrast}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "CrackSpec":
        fields = cls().to_dict()
        unknown = sorted(set(raw) - set(fields))
        if unknown:
            raise ConfigError(f"unknown data config keys: {unknown}")
        fields.update(raw)
        fields["width_range"] = tuple(fields["width_range"])
        fields["contrast"] = tuple(fields["contrast"])
        return cls(**fields).validate()


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

def _resize(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    img = Image.fromarray(grid.astype(np.float32), mode="F")
    return np.asarray(img.resize((width, height), Image.BICUBIC), dtype=np.float64)


def value_noise(rng: np.random.Generator, height: int, width: int, scale: float, octaves: int = 3) -> np.ndarray:
    """Multi-octave value noise normalised to [0, 1]."""
    total = np.zeros((height, width))
    amp, cell = 1.0, scale
    for _ in range(octaves):
        gh = max(2, int(math.ceil(height / cell)) + 1)
        gw = max(2, int(math.ceil(width / cell)) + 1)
        total += amp * _resize(rng.random((gh, gw)), height, width)
        amp *= 0.5
        cell = max(1.0, cell / 2)
    lo, hi = total.min(), total.max()
    return (total - lo) / (hi - lo) if hi > lo else np.zeros_like(total)


def _walk(rng, start, heading, steps, spec, height, width, depth, out):
    pts = [start]
    x, y = start
    for _ in range(steps):
        heading += rng.normal(0.0, spec.curvature)
        x, y = x + 2.0 * math.cos(heading), y + 2.0 * math.sin(heading)
        pts.append((x, y))
        if not (-4 <= x <= width + 4 and -4 <= y <= height + 4):
            break
        if depth < 2 and rng.random() < spec.branch_prob:
            turn = rng.choice([-1.0, 1.0]) * rng.uniform(math.pi / 6, math.pi / 3)
            _walk(rng, (x, y), heading + turn, int(steps * rng.uniform(0.2, 0.5)), spec,
                  height, width, depth + 1, out)
    out.append(pts)


def _crack_paths(rng, spec, height, width) -> List[List[Tuple[float, float]]]:
    paths: List[List[Tuple[float, float]]] = []
    count = int(rng.integers(1, spec.n_cracks + 1)) if spec.n_cracks else 0
    for _ in range(count):
        start = (rng.uniform(0, width), rng.uniform(0, height))
        steps = int(rng.uniform(0.4, 0.9) * max(height, width))
        heading = rng.uniform(0, 2 * math.pi)
        _walk(rng, start, heading, steps, spec, height, width, 0, paths)
    return paths


def render_sample(rng: np.random.Generator, spec: CrackSpec, height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    texture = value_noise(rng, height, width, spec.texture_scale)
    base = rng.uniform(0.45, 0.75) + 0.25 * (texture - 0.5)
    tint = rng.uniform(0.9, 1.1, size=3)
    canvas = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    for path in _crack_paths(rng, spec, height, width):
        w = rng.uniform(*spec.width_range)
        draw.line(path, fill=255, width=max(1, int(round(w))), joint="curve")
    mask = (np.asarray(canvas) > 127).astype(np.float32)
    soft = np.asarray(canvas.filter(ImageFilter.GaussianBlur(0.6)), dtype=np.float64) / 255.0
    depth = rng.uniform(*spec.contrast)
    gray = base * (1.0 - depth * soft)
    image = gray[None] * tint[:, None, None] + rng.normal(0.0, spec.noise, size=(3, height, width))
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask[None]


def generate(spec: CrackSpec, count: int, height: int, width: int) -> List[SegSample]:
    """``count`` samples; sample ``i`` depends only on ``(spec.seed, i)``."""
    spec.validate()
    samples = []
    for i in range(count):
        rng = np.random.default_rng([spec.seed, i])
        image, mask = render_sample(rng, spec, height, width)
        samples.append(SegSample(image=image, mask=mask, id=f"{i:05d}"))
    return samples


# ---------------------------------------------------------------------------
# split
# ---------------------------------------------------------------------------

def split_counts(n: int, ratios: Sequence[float]) -> List[int]:
    """Largest-remainder apportionment of ``n`` items to ``ratios``."""
    r = np.asarray(ratios, dtype=np.float64)
    if r.ndim != 1 or (r < 0).any() or r.sum() <= 0:
        raise ConfigError(f"split ratios must be non-negative with a positive sum, got {list(ratios)}")
    if n < len(r):
        raise ConfigError(f"cannot split {n} samples into {len(r)} parts")
    share = r / r.sum() * n
    counts = np.floor(share + 1e-9).astype(int)
    order = np.argsort(-(share - counts), kind="stable")
    for k in order[: n - counts.sum()]:
        counts[k] += 1
    return counts.tolist()


def split(samples: Sequence, ratios: Sequence[float] = (7, 1, 2), seed: int = 0) -> Tuple[list, ...]:
    counts = split_counts(len(samples), ratios)
    order = np.random.default_rng(seed).permutation(len(samples))
    parts, start = [], 0
    for c in counts:
        parts.append([samples[i] for i in sorted(order[start:start + c])])
        start += c
    return tuple(parts)


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------

def read_png(path) -> np.ndarray:
    """Read an 8-bit grayscale or RGB image as ``[C, H, W]`` float32 in [0, 1]."""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB" if img.mode in ("RGBA", "P", "CMYK") else "L")
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as err:
        raise ImageIOError(f"{path}: cannot decode image ({err})") from None
    return arr[None] if arr.ndim == 2 else np.ascontiguousarray(arr.transpose(2, 0, 1))


def _to_uint8(arr) -> Tuple[np.ndarray, str]:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] in (1, 3):
        a = a[0] if a.shape[0] == 1 else a.transpose(1, 2, 0)
    if a.ndim not in (2, 3):
        raise ValueError(f"cannot write an image of shape {np.shape(arr)}")
    if not np.isfinite(a).all():
        raise ValueError("image contains non-finite values")
    data = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    return data, ("L" if data.ndim == 2 else "RGB")


def _save(arr, path, fmt: str) -> None:
    data, mode = _to_uint8(arr)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(data, mode=mode).save(path, format=fmt)
    except OSError as err:
        raise ImageIOError(f"{path}: cannot write image ({err})") from None


def write_png(arr, path) -> None:
    _save(arr, path, "PNG")


def write_pgm(arr, path) -> None:
    """8-bit binary PGM of a single-channel map in [0, 1]."""
    data = np.asarray(arr)
    if data.ndim == 3 and data.shape[0] != 1:
        raise ValueError("PGM holds a single channel")
    _save(arr, path, "PPM")


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

def write_dataset(out_dir, samples: Sequence[SegSample], parts: Dict[str, Sequence[SegSample]],
                  meta: dict = None) -> None:
    out = Path(out_dir)
    for s in samples:
        write_png(s.image, out / "images" / f"{s.id}.png")
        write_png(s.mask, out / "masks" / f"{s.id}.png")
    index = {name: [s.id for s in parts.get(name, [])] for name in SPLIT_NAMES}
    if meta:
        index["meta"] = meta
    (out / "split.json").write_text(json.dumps(index, indent=2) + "\n")


def load_split(data_dir) -> Dict[str, List[str]]:
    path = Path(data_dir) / "split.json"
    try:
        index = json.loads(path.read_text())
    except FileNotFoundError:
        raise ImageIOError(f"{path}: split file not found") from None
    except json.JSONDecodeError as err:
        raise ImageIOError(f"{path}: malformed split file ({err})") from None
    return {name: list(index.get(name, [])) for name in SPLIT_NAMES}


def load_sample(data_dir, sample_id: str) -> SegSample:
    root = Path(data_dir)
    image = read_png(root / "images" / f"{sample_id}.png")
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    mask = (read_png(root / "masks" / f"{sample_id}.png")[:1] >= 0.5).astype(np.float32)
    return SegSample(image=image, mask=mask, id=sample_id)


def load_dataset(data_dir) -> Dict[str, List[SegSample]]:
    ids = load_split(data_dir)
    return {name: [load_sample(data_dir, i) for i in ids[name]] for name in SPLIT_NAMES}
