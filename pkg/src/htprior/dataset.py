"""Synthetic Line-Circle images: binary rasters of lines and circles whose ground truth keeps only the lines."""
from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from htprior.errors import ConfigurationError, LoadError

IMAGE_SIZE = 100
SPLITS = {"train": 744, "val": 256, "test": 500}
MIN_LINE_LENGTH = 20.0
RADIUS_RANGE = (5, 45)
SHAPE_COUNT_RANGE = (1, 5)
MANIFEST = "manifest.txt"


@dataclass
class LineCircleSample:
    index: int
    image: np.ndarray
    target: np.ndarray
    shapes: list[tuple] = field(default_factory=list)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.image.tobytes())
        h.update(self.target.tobytes())
        return h.hexdigest()


def render_line(raster: np.ndarray, p0, p1) -> None:
    """Set a one-pixel-wide integer line walk from ``p0`` to ``p1`` (both ``(x, y)``, inclusive)."""
    x0, y0 = int(p0[0]), int(p0[1])
    x1, y1 = int(p1[0]), int(p1[1])
    if (x0, y0) == (x1, y1):
        raise ConfigurationError("degenerate line: endpoints coincide")
    H, W = raster.shape
    for x, y in ((x0, y0), (x1, y1)):
        if not (0 <= x < W and 0 <= y < H):
            raise ConfigurationError(f"line endpoint ({x}, {y}) outside {W}x{H} raster")
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        raster[y0, x0] = 1
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def render_circle(raster: np.ndarray, center, radius: int) -> None:
    """Midpoint circle outline; pixels falling outside the raster are dropped."""
    cx, cy = int(center[0]), int(center[1])
    r = int(radius)
    H, W = raster.shape
    if not (RADIUS_RANGE[0] <= r <= RADIUS_RANGE[1]):
        raise ConfigurationError(f"circle radius {radius} outside {RADIUS_RANGE}")
    if not (0 <= cx < W and 0 <= cy < H):
        raise ConfigurationError(f"circle center ({cx}, {cy}) outside {W}x{H} raster")
    x, y, d = r, 0, 1 - r
    pts = []
    while x >= y:
        pts += [(x, y), (y, x), (-y, x), (-x, y), (-x, -y), (-y, -x), (y, -x), (x, -y)]
        y += 1
        if d < 0:
            d += 2 * y + 1
        else:
            x -= 1
            d += 2 * (y - x) + 1
    for ox, oy in pts:
        px, py = cx + ox, cy + oy
        if 0 <= px < W and 0 <= py < H:
            raster[py, px] = 1


def _sample_line(rng, size):
    while True:
        x0, y0, x1, y1 = (int(v) for v in rng.integers(0, size, 4))
        if math.hypot(x1 - x0, y1 - y0) >= MIN_LINE_LENGTH:
            return x0, y0, x1, y1


def generate_sample(seed: int, index: int, size: int = IMAGE_SIZE) -> LineCircleSample:
    """One sample drawn from its own RNG stream ``(seed, index)``."""
    rng = np.random.default_rng([seed, index])
    n_lines = int(rng.integers(SHAPE_COUNT_RANGE[0], SHAPE_COUNT_RANGE[1] + 1))
    n_circles = int(rng.integers(SHAPE_COUNT_RANGE[0], SHAPE_COUNT_RANGE[1] + 1))
    image = np.zeros((size, size), np.uint8)
    target = np.zeros((size, size), np.uint8)
    shapes: list[tuple] = []
    for _ in range(n_lines):
        x0, y0, x1, y1 = _sample_line(rng, size)
        render_line(target, (x0, y0), (x1, y1))
        shapes.append(("L", x0, y0, x1, y1))
    for _ in range(n_circles):
        r = int(rng.integers(RADIUS_RANGE[0], RADIUS_RANGE[1] + 1))
        cx, cy = (int(v) for v in rng.integers(r, size - r, 2))
        render_circle(image, (cx, cy), r)
        shapes.append(("C", cx, cy, r))
    image |= target
    return LineCircleSample(index, image, target, shapes)


def generate_dataset(seed: int, sizes: dict[str, int] | None = None) -> dict[str, list[LineCircleSample]]:
    """Deterministic train/val/test splits (744/256/500 by default) with no duplicate samples."""
    sizes = dict(SPLITS if sizes is None else sizes)
    seen: set[str] = set()
    splits: dict[str, list[LineCircleSample]] = {}
    stream = 0
    for name, count in sizes.items():
        out = []
        while len(out) < count:
            sample = generate_sample(seed, stream)
            stream += 1
            digest = sample.digest()
            if digest in seen:
                continue
            seen.add(digest)
            sample.index = sum(len(v) for v in splits.values()) + len(out)
            out.append(sample)
        splits[name] = out
    return splits


# ---------------------------------------------------------------------------
# PGM and manifest I/O

def write_pgm(path, raster: np.ndarray) -> None:
    """Binary 8-bit PGM; a {0,1} raster is stored as {0,255}."""
    arr = np.asarray(raster)
    if arr.dtype != np.uint8 or arr.max(initial=0) <= 1:
        arr = (np.clip(arr, 0, 1) * 255).round().astype(np.uint8)
    H, W = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 PGM with maxval 255 into a uint8 array."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc.strerror}") from exc
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise LoadError(f"{path}: truncated PGM header")
        tokens.append(blob[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise LoadError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        W, H, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise LoadError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise LoadError(f"{path}: unsupported maxval {maxval}")
    data = blob[pos:pos + W * H]
    if len(data) != W * H:
        raise LoadError(f"{path}: truncated pixel data")
    return np.frombuffer(data, np.uint8).reshape(H, W).copy()


def _format_shapes(shapes) -> str:
    return ";".join(",".join(str(v) for v in s) for s in shapes)


def _parse_shapes(text: str) -> list[tuple]:
    out = []
    for item in filter(None, text.split(";")):
        kind, *vals = item.split(",")
        out.append((kind, *(int(v) for v in vals)))
    return out


def save_split(directory, samples: list[LineCircleSample]) -> None:
    """Write ``NNNN_img.pgm`` / ``NNNN_gt.pgm`` per sample plus a manifest with shapes and hashes."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = ["# image\tground_truth\tsha256\tshapes"]
    for s in samples:
        img_name, gt_name = f"{s.index:04d}_img.pgm", f"{s.index:04d}_gt.pgm"
        write_pgm(d / img_name, s.image)
        write_pgm(d / gt_name, s.target)
        lines.append(f"{img_name}\t{gt_name}\t{s.digest()}\t{_format_shapes(s.shapes)}")
    (d / MANIFEST).write_text("\n".join(lines) + "\n")


def load_split(directory) -> list[LineCircleSample]:
    d = Path(directory)
    manifest = d / MANIFEST
    if not manifest.is_file():
        raise LoadError(f"{manifest}: manifest not found")
    samples = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise LoadError(f"{manifest}:{lineno}: expected 4 tab-separated fields")
        img_name, gt_name, digest, shapes = parts
        image = (read_pgm(d / img_name) > 127).astype(np.uint8)
        target = (read_pgm(d / gt_name) > 127).astype(np.uint8)
        sample = LineCircleSample(int(img_name[:4]), image, target, _parse_shapes(shapes))
        if sample.digest() != digest:
            raise LoadError(f"{d / img_name}: content hash does not match manifest")
        samples.append(sample)
    if not samples:
        raise LoadError(f"{manifest}: no samples listed")
    return samples


def manifest_digest(directory) -> str:
    """Hash over the manifests of every split under ``directory``."""
    h = hashlib.sha256()
    for name in sorted(os.listdir(directory)):
        m = Path(directory) / name / MANIFEST
        if m.is_file():
            h.update(name.encode())
            h.update(m.read_bytes())
    return h.hexdigest()
