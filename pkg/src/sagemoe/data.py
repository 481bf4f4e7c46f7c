"""Datasets: synthetic blobs, Netpbm raster I/O, directory layout and the tissue patch filter."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import Rng


@dataclass
class Sample:
    image: np.ndarray  # [C, H, W] in [0, 1]
    mask: np.ndarray  # [H, W] class indices

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.shape != self.image.shape[1:]:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} disagree")


class ParseError(ValueError):
    """Malformed Netpbm input; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


# ---------------------------------------------------------------- synthetic data


def _blob_sample(rng: Rng, H: int, W: int) -> Sample:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    for _ in range(100):
        n = int(rng.integers(1, 4))
        mask = np.zeros((H, W), dtype=bool)
        soft = np.zeros((H, W))
        for _ in range(n):
            cy, cx = rng.uniform(2) * np.array([H, W])
            ry, rx = (0.08 + 0.17 * rng.uniform(2)) * np.array([H, W])
            ang = rng.uniform() * np.pi
            c, s = np.cos(ang), np.sin(ang)
            dy, dx = yy - cy, xx - cx
            u = (c * dx + s * dy) / rx
            v = (-s * dx + c * dy) / ry
            r = np.sqrt(u * u + v * v)
            mask |= r <= 1.0
            # soft edge: about one pixel wide
            soft = np.maximum(soft, 1.0 / (1.0 + np.exp((r - 1.0) * min(rx, ry) * 2.5)))
        frac = mask.mean()
        if 0.05 <= frac <= 0.6:
            break
    else:  # pragma: no cover - the geometry makes this practically unreachable
        raise RuntimeError("could not draw a blob layout within the foreground bounds")

    # background: low-frequency texture in a pinkish stain, foreground: darker purple
    tex = rng.normal((3, H // 4 + 1, W // 4 + 1), std=0.06)
    tex = tex.repeat(4, axis=1).repeat(4, axis=2)[:, :H, :W]
    bg = np.array([0.85, 0.65, 0.75])[:, None, None] + tex
    fg = np.array([0.45, 0.25, 0.55])[:, None, None] + 0.5 * tex
    img = bg * (1.0 - soft) + fg * soft
    img = img + rng.normal((3, H, W), std=0.05)
    return Sample(np.clip(img, 0.0, 1.0), mask.astype(np.int64))


def synth_blobs(n: int, H: int = 32, W: int = 32, seed: int = 0) -> list[Sample]:
    """``n`` images with 1-3 soft-edged ellipses (class 1) on a textured background.

    Each sample draws from its own sub-stream, so sample ``i`` does not depend on ``n``.
    """
    if H < 16 or W < 16:
        raise ValueError("synthetic images need H, W >= 16")
    return [_blob_sample(Rng.stream(seed, 7, i), H, W) for i in range(n)]


def split_indices(n: int, seed: int, train_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Seed-deterministic disjoint train/val split."""
    perm = Rng.stream(seed, 3).permutation(n)
    cut = int(round(train_fraction * n))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def split_samples(samples: list, seed: int, train_fraction: float = 0.8) -> tuple[list, list]:
    tr, va = split_indices(len(samples), seed, train_fraction)
    return [samples[i] for i in tr], [samples[i] for i in va]


# ---------------------------------------------------------------- netpbm


_MAGIC = {b"P2": (1, False), b"P3": (3, False), b"P5": (1, True), b"P6": (3, True)}


def _read_header(buf: bytes) -> tuple[bytes, list[int], int]:
    """Return magic, [width, height, maxval] and the payload offset."""
    if len(buf) < 2 or buf[:2] not in _MAGIC:
        raise ParseError("not a P2/P3/P5/P6 file", 0)
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(buf) and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                end = buf.find(b"\n", pos)
                pos = len(buf) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError("malformed header", start)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ParseError("malformed header", pos)
    return buf[:2], fields, pos + 1


def read_netpbm(path) -> np.ndarray:
    """8-bit raw samples as ``uint8`` with shape [H, W] (gray) or [H, W, 3] (color)."""
    buf = Path(path).read_bytes()
    magic, (w, h, maxval), off = _read_header(buf)
    channels, binary = _MAGIC[magic]
    if w <= 0 or h <= 0:
        raise ParseError("image extents must be positive", off)
    if maxval != 255:
        raise ParseError(f"maxval {maxval} is not 255", off)
    n = w * h * channels
    if binary:
        if len(buf) - off < n:
            raise ParseError(f"truncated payload: need {n} bytes, have {len(buf) - off}", len(buf))
        data = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off)
    else:
        tokens = buf[off:].split()
        if len(tokens) < n:
            raise ParseError(f"truncated payload: need {n} samples, have {len(tokens)}", len(buf))
        try:
            vals = np.array([int(t) for t in tokens[:n]])
        except ValueError:
            raise ParseError("non-numeric sample", off) from None
        if vals.min() < 0 or vals.max() > 255:
            raise ParseError("sample exceeds maxval", off)
        data = vals.astype(np.uint8)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return data.reshape(shape).copy()


def write_netpbm(path, pixels: np.ndarray, binary: bool = True) -> None:
    """Write uint8 [H, W] as PGM or [H, W, 3] as PPM."""
    px = np.asarray(pixels)
    if px.dtype != np.uint8:
        raise TypeError("write_netpbm expects uint8 samples")
    if px.ndim == 2:
        magic = b"P5" if binary else b"P2"
    elif px.ndim == 3 and px.shape[2] == 3:
        magic = b"P6" if binary else b"P3"
    else:
        raise ValueError(f"unsupported pixel array shape {px.shape}")
    h, w = px.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    if binary:
        body = px.tobytes()
    else:
        rows = px.reshape(h, -1)
        body = b"\n".join(b" ".join(b"%d" % v for v in row) for row in rows) + b"\n"
    Path(path).write_bytes(header + body)


def load_raster(path, kind: str = "auto") -> np.ndarray:
    """Load a Netpbm file.

    ``kind="image"`` gives floats in [0, 1] ([C, H, W] for color, [H, W] for
    gray); ``kind="mask"`` thresholds gray values at 128 into {0, 1}. ``"auto"``
    treats PGM files as masks and PPM files as images.
    """
    px = read_netpbm(path)
    if kind == "auto":
        kind = "mask" if px.ndim == 2 else "image"
    if kind == "mask":
        if px.ndim == 3:
            px = px.mean(axis=2)
        return (px >= 128).astype(np.int64)
    if kind != "image":
        raise ValueError(f"unknown raster kind {kind!r}")
    img = px.astype(np.float64) / 255.0
    return img.transpose(2, 0, 1) if img.ndim == 3 else img


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- dataset directories


def save_dataset(out_dir, samples: list[Sample], seed: int) -> None:
    """Write ``images/NNNN.ppm``, ``masks/NNNN.pgm`` and ``split.txt`` (80/20, seeded)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        write_netpbm(out / "images" / f"{i:04d}.ppm", to_uint8(s.image.transpose(1, 2, 0)))
        write_netpbm(out / "masks" / f"{i:04d}.pgm", (s.mask > 0).astype(np.uint8) * 255)
    tr, va = split_indices(len(samples), seed)
    split = {int(i): "train" for i in tr} | {int(i): "val" for i in va}
    lines = [f"{i:04d} {split[i]}" for i in range(len(samples))]
    (out / "split.txt").write_text("".join(line + "\n" for line in lines))


def load_dataset(data_dir) -> dict[str, list[Sample]]:
    """Read a dataset directory into ``{"train": [...], "val": [...]}``."""
    root = Path(data_dir)
    manifest = root / "split.txt"
    if not manifest.is_file():
        raise FileNotFoundError(f"missing manifest {manifest}")
    out: dict[str, list[Sample]] = {"train": [], "val": []}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in out:
            raise ValueError(f"{manifest}:{lineno}: expected 'NNNN train|val'")
        key = parts[0]
        image = load_raster(root / "images" / f"{key}.ppm", "image")
        mask = load_raster(root / "masks" / f"{key}.pgm", "mask")
        out[parts[1]].append(Sample(image, mask))
    return out


# ---------------------------------------------------------------- patch filter


@dataclass(frozen=True)
class PatchRule:
    sigma_min: float = 10.0
    mu_max: float = 230.0
    mask_min: float = 100.0
    patch: int = 1536
    stride: int = 512


def patch_filter(patch: np.ndarray, mask: np.ndarray, rule: PatchRule = PatchRule()) -> bool:
    """Keep a patch iff intensity std >= sigma_min, mean <= mu_max and mask sum >= mask_min.

    Statistics are population moments over every channel value jointly, in
    8-bit units.
    """
    p = np.asarray(patch, dtype=np.float64)
    m = np.asarray(mask)
    if p.shape[:2] != m.shape:
        raise ValueError(f"patch {p.shape} and mask {m.shape} differ in spatial size")
    return bool(p.std() >= rule.sigma_min and p.mean() <= rule.mu_max and m.sum() >= rule.mask_min)


def iter_windows(height: int, width: int, rule: PatchRule):
    """Top-left corners of the sliding windows; an image smaller than a patch is one window."""
    ph, pw = min(rule.patch, height), min(rule.patch, width)
    ys = range(0, height - ph + 1, rule.stride)
    xs = range(0, width - pw + 1, rule.stride)
    for y in ys:
        for x in xs:
            yield y, x, ph, pw


def filter_directory(image_dir, mask_dir, rule: PatchRule = PatchRule()) -> tuple[list[str], int]:
    """Apply the patch filter to every window of every image; returns kept entries and the reject count."""
    kept, rejected = [], 0
    for name in sorted(os.listdir(image_dir)):
        stem, ext = os.path.splitext(name)
        if ext.lower() not in (".ppm", ".pgm"):
            continue
        img = read_netpbm(Path(image_dir) / name)
        if img.ndim == 2:
            img = img[:, :, None]
        mask_path = Path(mask_dir) / f"{stem}.pgm"
        mask = (read_netpbm(mask_path) >= 128).astype(np.int64)
        for y, x, ph, pw in iter_windows(img.shape[0], img.shape[1], rule):
            if patch_filter(img[y : y + ph, x : x + pw], mask[y : y + ph, x : x + pw], rule):
                kept.append(f"{stem} {y} {x}")
            else:
                rejected += 1
    return kept, rejected
