"""Image decoding, OTB-style sequence directories, boxes files and synthetic datasets."""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from collections.abc import Sequence as Seq
from typing import Iterator

import numpy as np

from .geometry import BoundingBox

log = logging.getLogger(__name__)

GT_FILE = "groundtruth_rect.txt"
IMG_DIR = "img"
_NATIVE = (b"P5", b"P6")


class ImageFormatError(ValueError):
    """Raised for malformed or unsupported image files."""


class DataError(ValueError):
    """Raised for malformed sequence directories or box files."""


# ---------------------------------------------------------------- images

def _parse_netpbm(data: bytes, name: str) -> np.ndarray:
    magic = data[:2]
    if magic not in _NATIVE:
        raise ImageFormatError(f"{name}: bad magic {magic!r}")
    pos = 2
    header = []
    while len(header) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            if pos >= len(data):
                raise ImageFormatError(f"{name}: unexpected end of data in header")
            raise ImageFormatError(f"{name}: malformed header near byte {pos}")
        header.append(int(data[start:pos]))
    if pos >= len(data):
        raise ImageFormatError(f"{name}: unexpected end of data")
    pos += 1  # single whitespace byte before the raster
    width, height, maxval = header
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"{name}: invalid header {width}x{height} maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * channels * dtype.itemsize
    if len(data) - pos < need:
        raise ImageFormatError(f"{name}: unexpected end of data ({len(data) - pos} of {need} raster bytes)")
    raster = np.frombuffer(data, dtype=dtype, count=width * height * channels, offset=pos)
    img = raster.reshape(height, width, channels).astype(np.float32) / np.float32(maxval)
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return np.ascontiguousarray(img.transpose(2, 0, 1))[None]


def decode_image(path: str | Path) -> np.ndarray:
    """Decode to a (1, 3, H, W) float32 tensor in [0, 1].

    P5/P6 are read natively; other formats go through Pillow when installed.
    """
    path = Path(path)
    data = path.read_bytes()
    if data[:2] in _NATIVE or path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        return _parse_netpbm(data, str(path))
    try:
        from PIL import Image
    except ImportError as exc:  # optional adapter
        raise ImageFormatError(f"{path}: bad magic {data[:2]!r} (install Pillow for other formats)") from exc
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))[None]


def encode_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write a (3, H, W) or (1, 3, H, W) float image in [0, 1], or (H, W, 3) uint8, as P6."""
    if image.dtype == np.uint8:
        hwc = image
    else:
        chw = image[0] if image.ndim == 4 else image
        hwc = np.round(np.clip(chw, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = hwc.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(hwc).tobytes())


# ------------------------------------------------------------- sequences

class LazyFrames(Seq):
    """Frames decoded on access from a list of paths, as (3, H, W) float32."""

    def __init__(self, paths: list[Path]):
        self.paths = paths

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return LazyFrames(self.paths[i])
        return decode_image(self.paths[i])[0]

    def __iter__(self) -> Iterator[np.ndarray]:
        for p in self.paths:
            yield decode_image(p)[0]


@dataclass
class Sequence:
    name: str
    frames: Seq[np.ndarray]
    boxes: list[BoundingBox]
    tags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.frames) != len(self.boxes) or not self.boxes:
            raise DataError(f"{self.name}: {len(self.frames)} frames but {len(self.boxes)} boxes")
        for i, b in enumerate(self.boxes):
            if not b.is_valid():
                raise DataError(f"{self.name}: box {i} has non-positive area: {b}")

    def __len__(self) -> int:
        return len(self.boxes)


_SPLIT = re.compile(r"[,\s]+")


def parse_groundtruth(text: str, source: str = "groundtruth") -> list[BoundingBox]:
    """OTB ``x,y,w,h`` lines (comma, tab or space separated, 1-based) to 0-based boxes."""
    boxes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = _SPLIT.split(line.strip())
        try:
            if len(parts) != 4:
                raise ValueError
            x, y, w, h = (float(p) for p in parts)
        except ValueError:
            raise DataError(f"{source}:{lineno}: cannot parse box {line!r}") from None
        boxes.append(BoundingBox(x - 1, y - 1, w, h))
    return boxes


def format_groundtruth(boxes: list[BoundingBox]) -> str:
    return "".join(f"{b.x + 1:.2f},{b.y + 1:.2f},{b.w:.2f},{b.h:.2f}\n" for b in boxes)


def _frame_key(p: Path):
    digits = re.findall(r"\d+", p.stem)
    return (int(digits[-1]) if digits else -1, p.name)


def load_sequence(directory: str | Path) -> Sequence:
    directory = Path(directory)
    img_dir = directory / IMG_DIR
    gt_path = directory / GT_FILE
    if not img_dir.is_dir() or not gt_path.is_file():
        raise DataError(f"{directory}: expected {IMG_DIR}/ and {GT_FILE}")
    frames = sorted((p for p in img_dir.iterdir() if p.is_file() and not p.name.startswith(".")), key=_frame_key)
    boxes = parse_groundtruth(gt_path.read_text(), str(gt_path))
    if len(frames) != len(boxes):
        raise DataError(f"{directory}: {len(frames)} frames but {len(boxes)} ground-truth lines")
    return Sequence(directory.name, LazyFrames(frames), boxes)


def load_dataset(directory: str | Path) -> list[Sequence]:
    """All sequence subdirectories of ``directory`` (sorted by name), or the directory itself."""
    directory = Path(directory)
    if (directory / GT_FILE).is_file():
        return [load_sequence(directory)]
    seqs = [load_sequence(d) for d in sorted(directory.iterdir()) if (d / GT_FILE).is_file()]
    if not seqs:
        raise DataError(f"{directory}: no sequences found")
    return seqs


def write_boxes(path: str | Path, boxes: list[BoundingBox]) -> None:
    """One ``frame_index,x,y,w,h`` line per frame, 0-based, two decimals."""
    Path(path).write_text("".join(f"{i},{b.x:.2f},{b.y:.2f},{b.w:.2f},{b.h:.2f}\n" for i, b in enumerate(boxes)))


def read_boxes(path: str | Path) -> list[BoundingBox]:
    boxes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.strip().split(",")
        try:
            if len(parts) != 5:
                raise ValueError
            idx = int(parts[0])
            x, y, w, h = (float(p) for p in parts[1:])
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed box line {line!r}") from None
        if idx != len(boxes):
            raise DataError(f"{path}:{lineno}: frame index {idx} out of order (expected {len(boxes)})")
        boxes.append(BoundingBox(x, y, w, h))
    return boxes


# ------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SynthSpec:
    num_sequences: int = 8
    frames_per_sequence: int = 40
    image_size: int = 128
    target_min: float = 16.0
    target_max: float = 28.0
    motion_amplitude: float = 3.0
    scale_drift: float = 0.01
    distractor_prob: float = 1.0
    # fraction of the distractor's texture blocks copied from the target
    distractor_similarity: float = 0.5
    texture_seed: int = 0

    def __post_init__(self):
        if min(self.num_sequences, self.frames_per_sequence, self.image_size) < 1:
            raise ValueError("counts and image size must be positive")
        if not 0 < self.target_min <= self.target_max:
            raise ValueError(f"bad target size range {self.target_min}..{self.target_max}")
        if self.target_max * 1.5 > self.image_size:
            raise ValueError(f"target up to {self.target_max}px does not fit a {self.image_size}px image")
        if self.motion_amplitude < 0 or self.scale_drift < 0 or not 0 <= self.distractor_prob <= 1:
            raise ValueError("motion, drift and distractor probability must be non-negative")
        if not 0 <= self.distractor_similarity <= 1:
            raise ValueError(f"distractor_similarity must be in [0, 1], got {self.distractor_similarity}")


def parse_kv(text: str, source: str = "config") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{source}:{lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def from_kv(cls, values: dict[str, str], source: str = "config"):
    """Build dataclass ``cls`` from string values, coercing by the field defaults' types."""
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise DataError(f"{source}: unknown key {key!r}")
        default = known[key].default
        try:
            if isinstance(default, bool):
                kwargs[key] = value.lower() in ("1", "true", "yes", "on")
            elif isinstance(default, tuple):
                kwargs[key] = tuple(float(v) for v in _SPLIT.split(value.strip("()[] ")) if v)
            elif default is None or isinstance(default, str):
                kwargs[key] = value
            else:
                kwargs[key] = type(default)(value)
        except ValueError:
            raise DataError(f"{source}: bad value for {key}: {value!r}") from None
    return cls(**kwargs)


def _smooth_noise(rng: np.random.Generator, size: tuple[int, int], cells: int) -> np.ndarray:
    coarse = rng.random((3, cells + 1, cells + 1))
    ys = np.linspace(0, cells, size[0])
    xs = np.linspace(0, cells, size[1])
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c = coarse
    return (
        c[:, y0][:, :, x0] * (1 - fy) * (1 - fx)
        + c[:, y0 + 1][:, :, x0] * fy * (1 - fx)
        + c[:, y0][:, :, x0 + 1] * (1 - fy) * fx
        + c[:, y0 + 1][:, :, x0 + 1] * fy * fx
    )


def make_background(rng: np.random.Generator, size: int) -> np.ndarray:
    bg = 0.25 + 0.35 * _smooth_noise(rng, (size, size), 6) + 0.12 * _smooth_noise(rng, (size, size), 24)
    bg += rng.normal(0, 0.03, bg.shape)
    return np.clip(bg, 0, 1)


def make_texture(
    rng: np.random.Generator, blocks: int = 4, res: int = 32, like: np.ndarray | None = None, share: float = 0.0
) -> np.ndarray:
    """High-contrast blocky color texture, (3, res, res).

    With ``like``, each block is copied from that texture with probability ``share``.
    """
    levels = rng.choice([0.05, 0.35, 0.65, 0.95], size=(3, blocks, blocks))
    tex = np.kron(levels, np.ones((res // blocks, res // blocks)))
    tex = np.clip(tex + rng.normal(0, 0.04, tex.shape), 0, 1)
    if like is not None:
        keep = np.kron(rng.random((blocks, blocks)) < share, np.ones((res // blocks, res // blocks), dtype=bool))
        tex = np.where(keep[None], like, tex)
    return tex


def _coverage_and_sampler(start: float, length: float, n_pix: int, n_tex: int):
    lo = max(int(math.floor(start)), 0)
    hi = min(int(math.ceil(start + length)), n_pix)
    if hi <= lo:
        return lo, np.zeros(0), np.zeros((0, n_tex))
    pix = np.arange(lo, hi)
    cover = np.clip(np.minimum(pix + 1, start + length) - np.maximum(pix, start), 0, 1)
    q = np.clip(((pix + 0.5) - start) / length * n_tex - 0.5, 0, n_tex - 1)
    i0 = np.minimum(np.floor(q).astype(int), n_tex - 2)
    frac = q - i0
    m = np.zeros((hi - lo, n_tex))
    m[np.arange(hi - lo), i0] = 1 - frac
    m[np.arange(hi - lo), i0 + 1] += frac
    return lo, cover, m


def paint(frame: np.ndarray, texture: np.ndarray, box: BoundingBox) -> None:
    """Composite ``texture`` onto ``frame`` (3, H, W) over ``box`` with sub-pixel edge coverage."""
    _, h, w = frame.shape
    y_lo, cy, ry = _coverage_and_sampler(box.y, box.h, h, texture.shape[1])
    x_lo, cx, rx = _coverage_and_sampler(box.x, box.w, w, texture.shape[2])
    if cy.size == 0 or cx.size == 0:
        return
    patch = np.einsum("yi,cij,xj->cyx", ry, texture, rx)
    alpha = cy[:, None] * cx[None, :]
    region = frame[:, y_lo:y_lo + cy.size, x_lo:x_lo + cx.size]
    region *= 1 - alpha
    region += alpha * patch


def _walk(rng, n, size, w, h, amp, drift):
    """Center path with persistent velocity (|v| <= amp), bouncing inside the frame."""
    cx = rng.uniform(w, size - w)
    cy = rng.uniform(h, size - h)
    v = rng.uniform(-amp, amp, 2) if amp > 0 else np.zeros(2)
    scale = 1.0
    boxes = []
    for _ in range(n):
        sw, sh = w * scale, h * scale
        cx = min(max(cx, sw / 2), size - sw / 2)
        cy = min(max(cy, sh / 2), size - sh / 2)
        box = BoundingBox.from_center(cx, cy, sw, sh)
        boxes.append(BoundingBox(*(round(float(t), 2) for t in (box.x, box.y, box.w, box.h))))
        if amp > 0:
            v = v + rng.normal(0, amp / 4, 2)
            speed = float(np.hypot(*v))
            if speed > amp:
                v *= amp / speed
            if not sw / 2 <= cx + v[0] <= size - sw / 2:
                v[0] = -v[0]
            if not sh / 2 <= cy + v[1] <= size - sh / 2:
                v[1] = -v[1]
            cx, cy = cx + v[0], cy + v[1]
        if drift > 0:
            scale = float(np.clip(scale * math.exp(rng.uniform(-drift, drift)), 0.75, 1.33))
    return [_clip_box(b, size) for b in boxes]


def _clip_box(b: BoundingBox, size: int) -> BoundingBox:
    x = round(min(max(b.x, 0.0), size - b.w), 2)
    y = round(min(max(b.y, 0.0), size - b.h), 2)
    if x + b.w > size:
        x = round(x - 0.01, 2)
    if y + b.h > size:
        y = round(y - 0.01, 2)
    return BoundingBox(x, y, b.w, b.h)


def render_sequence(spec: SynthSpec, seed: int, index: int) -> tuple[list[np.ndarray], list[BoundingBox]]:
    """One synthetic sequence as uint8 (H, W, 3) frames plus exact boxes."""
    rng = np.random.default_rng([seed, spec.texture_seed, index])
    size = spec.image_size
    n = spec.frames_per_sequence
    background = make_background(rng, size)
    tw = rng.uniform(spec.target_min, spec.target_max)
    th = float(np.clip(tw * rng.uniform(0.7, 1.4), spec.target_min, spec.target_max))
    texture = make_texture(rng)
    boxes = _walk(rng, n, size, tw, th, spec.motion_amplitude, spec.scale_drift)
    distractor = None
    if rng.random() < spec.distractor_prob:
        d_tex = make_texture(rng, like=texture, share=spec.distractor_similarity)
        d_boxes = _walk(rng, n, size, tw, th, spec.motion_amplitude, 0.0)
        distractor = (d_tex, d_boxes)
    frames = []
    for t in range(n):
        frame = background.copy()
        if distractor is not None:
            paint(frame, distractor[0], distractor[1][t])
        paint(frame, texture, boxes[t])
        frames.append(np.round(frame * 255).astype(np.uint8).transpose(1, 2, 0))
    return frames, boxes


def write_sequence(directory: Path, frames: list[np.ndarray], boxes: list[BoundingBox]) -> None:
    (directory / IMG_DIR).mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(frames))))
    for t, frame in enumerate(frames, 1):
        encode_ppm(directory / IMG_DIR / f"{t:0{width}d}.ppm", frame)
    (directory / GT_FILE).write_text(format_groundtruth(boxes))


def synth_generate(spec: SynthSpec, seed: int, out_dir: str | Path, threads: int = 1) -> list[Path]:
    """Write ``spec.num_sequences`` sequences under ``out_dir``; deterministic in ``seed``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(i: int) -> Path:
        frames, boxes = render_sequence(spec, seed, i)
        d = out_dir / f"seq_{i:04d}"
        write_sequence(d, frames, boxes)
        return d

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            dirs = list(pool.map(one, range(spec.num_sequences)))
    else:
        dirs = [one(i) for i in range(spec.num_sequences)]
    log.info("wrote %d sequences to %s", len(dirs), out_dir)
    return dirs


class _Uint8Frames(Seq):
    """uint8 (H, W, 3) frames exposed as (3, H, W) float32 on access (4x less memory)."""

    def __init__(self, frames: list[np.ndarray]):
        self.frames = frames

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return _Uint8Frames(self.frames[i])
        return self.frames[i].transpose(2, 0, 1).astype(np.float32) / np.float32(255)


def in_memory_sequence(name: str, frames: list[np.ndarray], boxes: list[BoundingBox]) -> Sequence:
    """Wrap uint8 (H, W, 3) frames as a Sequence yielding (3, H, W) float32 arrays."""
    if all(f.dtype == np.uint8 for f in frames):
        return Sequence(name, _Uint8Frames(list(frames)), boxes)
    return Sequence(name, list(frames), boxes)
