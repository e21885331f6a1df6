"""Image decoding, dataset manifests, preprocessing and the synthetic ring dataset."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import ManifestError, ParseError, ShapeError
from .model import ModelConfig
from .nnops import _nearest_index

PathLike = Union[str, Path]
CLASS_NAMES = ("normal", "moderate", "advanced")


# ------------------------------------------------------------ PPM / PGM

def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens, pos, n = [], 0, len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise ParseError(f"truncated header at byte offset {pos}")
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos


def parse_image(data: bytes) -> np.ndarray:
    """Decode binary PGM (P5) or PPM (P6) with maxval 255 into a C x H x W tensor in [0, 1]."""
    if data[:2] == b"P5":
        channels = 1
    elif data[:2] == b"P6":
        channels = 3
    else:
        raise ParseError(f"bad magic {data[:2]!r} at byte offset 0 (expected P5 or P6)")
    tokens, pos = _header_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError(f"non-numeric header field before byte offset {pos}") from None
    if width < 1 or height < 1:
        raise ParseError(f"non-positive image size {width}x{height} before byte offset {pos}")
    if maxval != 255:
        raise ParseError(f"maxval {maxval} is not 255 (header ends at byte offset {pos})")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ParseError(f"missing whitespace after header at byte offset {pos}")
    pos += 1
    need = width * height * channels
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise ParseError(
            f"truncated payload: expected {need} bytes from offset {pos}, "
            f"data ends at byte offset {len(data)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return (pixels.transpose(2, 0, 1) / 255.0).astype(np.float64)


def encode_image(image: np.ndarray) -> bytes:
    """Encode a C x H x W tensor in [0, 1] (C = 1 or 3) as P5/P6 bytes, rounding to 8 bits."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ShapeError(f"image must be 1 x H x W or 3 x H x W, got {image.shape}")
    c, h, w = image.shape
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_image(path: PathLike) -> np.ndarray:
    return parse_image(Path(path).read_bytes())


def write_image(path: PathLike, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_image(image))


# ------------------------------------------------------------- manifests

@dataclass(frozen=True)
class Sample:
    paths: tuple[Path, ...]
    label: int


@dataclass
class Manifest:
    samples: list[Sample]
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def labels(self) -> list[int]:
        return [s.label for s in self.samples]


def load_manifest(path: PathLike) -> Manifest:
    """Parse ``classes: a,b,c`` followed by ``path[,path2]<TAB>label`` lines.

    Relative image paths are resolved against the manifest's directory.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from None
    base = path.parent
    class_names = None
    samples = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if class_names is None:
            key, sep, rest = line.partition(":")
            if not sep or key.strip() != "classes":
                raise ManifestError(f"{path}:{lineno}: expected 'classes: a,b,c' header")
            class_names = [c.strip() for c in rest.split(",") if c.strip()]
            if not class_names:
                raise ManifestError(f"{path}:{lineno}: empty class list")
            continue
        fields = raw.rstrip("\r\n").split("\t")
        if len(fields) != 2:
            raise ManifestError(f"{path}:{lineno}: expected 'path<TAB>label', got {raw!r}")
        try:
            label = int(fields[1].strip())
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: label {fields[1]!r} is not an integer") from None
        if not 0 <= label < len(class_names):
            raise ManifestError(
                f"{path}:{lineno}: label {label} out of range for {len(class_names)} classes")
        parts = [p.strip() for p in fields[0].split(",")]
        if not 1 <= len(parts) <= 2 or not all(parts):
            raise ManifestError(f"{path}:{lineno}: expected one or two image paths")
        paths = tuple(base / p for p in parts)
        for p in paths:
            if not p.is_file():
                raise ManifestError(f"{path}:{lineno}: image {p} does not exist")
        samples.append(Sample(paths, label))
    if class_names is None:
        raise ManifestError(f"{path}: missing 'classes:' header")
    if not samples:
        raise ManifestError(f"{path}: manifest has no samples")
    return Manifest(samples, class_names)


def write_manifest(path: PathLike, manifest: Manifest) -> None:
    path = Path(path)
    lines = ["classes: " + ",".join(manifest.class_names)]
    for s in manifest.samples:
        rel = ",".join(os.path.relpath(p, path.parent) for p in s.paths)
        lines.append(f"{rel}\t{s.label}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------- preprocessing

def resize_nearest(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    rows = _nearest_index(out_h, image.shape[1])
    cols = _nearest_index(out_w, image.shape[2])
    return image[:, rows][:, :, cols]


def preprocess(images: Union[np.ndarray, Sequence[np.ndarray]], config: ModelConfig) -> np.ndarray:
    """Resize to the model input size and map [0, 1] to [-1, 1].

    For six-channel configs pass (fundus, oct); each is resized on its own
    and the two are stacked fundus first.
    """
    if isinstance(images, np.ndarray):
        images = [images]
    h, w = config.input_size
    resized = [resize_nearest(np.asarray(im, dtype=np.float64), h, w) for im in images]
    out = np.concatenate(resized, axis=0)
    if out.shape[0] != config.input_channels:
        raise ShapeError(
            f"images provide {out.shape[0]} channels, model expects {config.input_channels}")
    return (out - 0.5) / 0.5


def load_sample(sample: Sample, config: ModelConfig) -> np.ndarray:
    return preprocess([read_image(p) for p in sample.paths], config)


def load_arrays(manifest: Manifest, config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """All samples stacked into an N x C x H x W batch plus the label vector."""
    x = np.stack([load_sample(s, config) for s in manifest.samples])
    return x, np.array(manifest.labels, dtype=np.int64)


# ------------------------------------------------------- synthetic rings

@dataclass(frozen=True)
class RingStyle:
    width: float  # annulus thickness as a fraction of image size
    brightness: float  # ring intensity before colour tint
    notched: bool


# healthy rim, rim with one notched quadrant, thin faint rim
RING_STYLES = {
    0: RingStyle(0.14, 0.90, False),
    1: RingStyle(0.14, 0.90, True),
    2: RingStyle(0.05, 0.50, False),
}
RING_TINT = np.array([1.0, 0.85, 0.45])
BACKGROUND = np.array([0.35, 0.12, 0.06])
RADIUS_FRAC = 0.30
NOISE_STD = 0.04


def ring_mask(size: int, cy: float, cx: float, radius: float, width: float,
              notch_quadrant: int | None = None) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dist = np.hypot(yy - cy, xx - cx)
    mask = np.abs(dist - radius) <= width / 2.0
    if notch_quadrant is not None:
        top = yy < cy
        left = xx < cx
        quad = np.where(top, np.where(left, 0, 1), np.where(left, 2, 3))
        mask &= quad != notch_quadrant
    return mask


def render_ring(rng: np.random.Generator, label: int, size: int) -> np.ndarray:
    style = RING_STYLES[label]
    cy = cx = (size - 1) / 2.0
    cy += rng.uniform(-1.5, 1.5)
    cx += rng.uniform(-1.5, 1.5)
    radius = RADIUS_FRAC * size * rng.uniform(0.9, 1.1)
    notch = int(rng.integers(4)) if style.notched else None
    mask = ring_mask(size, cy, cx, radius, max(style.width * size, 1.0), notch)
    ring = style.brightness * RING_TINT
    img = BACKGROUND[:, None, None] + (ring - BACKGROUND)[:, None, None] * mask[None]
    img = img + rng.normal(0.0, NOISE_STD, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_dataset(out_dir: PathLike, seed: int, per_class: int, size: int = 32,
                  class_names: Sequence[str] = CLASS_NAMES) -> Manifest:
    """Write ``per_class`` seeded ring images per class plus ``manifest.txt`` into ``out_dir``."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from None
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(per_class):
        for label in range(len(RING_STYLES)):
            img = render_ring(rng, label, size)
            p = out / f"ring_{i:04d}_c{label}.ppm"
            write_image(p, img)
            samples.append(Sample((p,), label))
    manifest = Manifest(samples, list(class_names))
    write_manifest(out / "manifest.txt", manifest)
    return manifest
