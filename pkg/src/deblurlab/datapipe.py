"""Dataset indexing, clip sampling and clip-consistent augmentation.

On-disk layout (one directory per split)::

    <root>/<split>/<sequence>/blurry/00000.png
    <root>/<split>/<sequence>/sharp/00000.png
    <root>/<split>/<sequence>/flow/00002_offset-1.flo   (optional)
"""

from __future__ import annotations

import functools
import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import cv2
import numpy as np
from PIL import Image
from skimage import color as skcolor

log = logging.getLogger(__name__)

FRAME_RE = re.compile(r"^(\d{5})\.png$")


class DatasetError(ValueError):
    pass


# --------------------------------------------------------------------------
# index

@dataclass
class SequenceEntry:
    name: str
    path: Path
    blurry: List[Path]
    sharp: List[Path]

    def __len__(self):
        return len(self.blurry)


@dataclass
class DatasetIndex:
    root: Path
    sequences: dict

    def __len__(self):
        return len(self.sequences)

    def frame_count(self, sequence_id: str) -> int:
        return len(self.sequences[sequence_id])

    def valid_centers(self, sequence_length: int) -> List[Tuple[str, int]]:
        """Every (sequence, center) whose full temporal window exists."""
        half = _half_window(sequence_length)
        out = []
        for name, seq in self.sequences.items():
            out.extend((name, c) for c in range(half, len(seq) - half))
        return out


def _half_window(sequence_length: int) -> int:
    if sequence_length < 1 or sequence_length % 2 == 0:
        raise ValueError(f"sequence length must be a positive odd number, got {sequence_length}")
    return (sequence_length - 1) // 2


def _frames(directory: Path) -> dict:
    if not directory.is_dir():
        return {}
    return {int(m.group(1)): p for p in directory.iterdir() if (m := FRAME_RE.match(p.name))}


def scan_dataset(root, split: Optional[str] = None, verify: bool = True) -> DatasetIndex:
    """Index ``root`` (or ``root/split``) by sequence.

    Every blurry frame needs a sharp frame with the same number; frame
    numbers must be contiguous from zero.
    """
    root = Path(root)
    if split is not None:
        root = root / split
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    sequences = {}
    for seq_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        blurry = _frames(seq_dir / "blurry")
        sharp = _frames(seq_dir / "sharp")
        if not blurry:
            continue
        missing = sorted(set(blurry) - set(sharp))
        if missing:
            raise DatasetError(f"{seq_dir.name}: no sharp frame for blurry frame(s) {missing[:5]}")
        numbers = sorted(blurry)
        if numbers != list(range(len(numbers))):
            raise DatasetError(f"{seq_dir.name}: frame numbers are not contiguous from 00000")
        entry = SequenceEntry(seq_dir.name, seq_dir, [blurry[i] for i in numbers], [sharp[i] for i in numbers])
        if verify:
            for p in entry.blurry + entry.sharp:
                _verify_image(p)
        sequences[seq_dir.name] = entry
    if not sequences:
        raise DatasetError(f"no sequences found under {root}")
    return DatasetIndex(root=root, sequences=sequences)


def _verify_image(path: Path):
    try:
        with Image.open(path) as im:
            im.verify()
    except Exception as e:
        raise DatasetError(f"unreadable image {path}: {e}") from e


@functools.lru_cache(maxsize=128)
def load_image(path) -> np.ndarray:
    """8-bit image file -> read-only float32 RGB array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    arr.setflags(write=False)
    return arr


def save_image(path, img: np.ndarray):
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


# --------------------------------------------------------------------------
# clips

@dataclass
class VideoClip:
    blurry_frames: List[np.ndarray]
    sharp_reference: np.ndarray
    sequence_id: str = ""
    center_index: int = 0
    # warped neighbours in temporal order (center excluded), set by prewarp
    warped_neighbors: Optional[List[np.ndarray]] = None

    def __post_init__(self):
        if len(self.blurry_frames) % 2 == 0:
            raise ValueError(f"clip needs an odd number of frames, got {len(self.blurry_frames)}")
        shape = self.sharp_reference.shape
        if any(f.shape != shape for f in self.blurry_frames):
            raise ValueError("all frames of a clip must share dimensions")

    @property
    def length(self) -> int:
        return len(self.blurry_frames)

    @property
    def center(self) -> np.ndarray:
        return self.blurry_frames[self.length // 2]

    @property
    def offsets(self) -> List[int]:
        half = self.length // 2
        return [d for d in range(-half, half + 1) if d != 0]


def sample_clip(index: DatasetIndex, sequence_id: str, center: int, sequence_length: int) -> VideoClip:
    half = _half_window(sequence_length)
    seq = index.sequences[sequence_id]
    if center - half < 0 or center + half >= len(seq):
        raise IndexError(
            f"window of {sequence_length} frames around {center} is outside "
            f"{sequence_id} (frames 0..{len(seq) - 1})"
        )
    frames = [load_image(p) for p in seq.blurry[center - half:center + half + 1]]
    return VideoClip(frames, load_image(seq.sharp[center]), sequence_id, center)


# --------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentationPolicy:
    rotations: bool = True
    flips: bool = True
    crop_size: Optional[int] = 128
    photometric: bool = False
    photometric_p: float = 0.5
    hue: float = 0.05
    contrast: Tuple[float, float] = (0.7, 1.3)
    saturation: Tuple[float, float] = (0.7, 1.3)
    random_scale: str = "off"
    scale_range: Tuple[float, float] = (0.25, 1.0)
    scale_values: Tuple[float, ...] = (1 / 4, 1 / 3, 1 / 2)
    divisor: int = 1

    def __post_init__(self):
        if not 0.0 <= self.photometric_p <= 1.0:
            raise ValueError("photometric_p must be in [0, 1]")
        if self.random_scale not in ("off", "continuous", "discrete"):
            raise ValueError(f"unknown random_scale mode {self.random_scale!r}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"scale range must satisfy 0 < lo <= hi <= 1, got {self.scale_range}")
        if self.random_scale == "discrete" and (not self.scale_values or not all(0 < s <= 1 for s in self.scale_values)):
            raise ValueError("discrete scales must lie in (0, 1]")
        if self.crop_size is not None and self.crop_size % self.divisor:
            raise ValueError(f"crop size {self.crop_size} is not divisible by {self.divisor}")


SU_SCALES = dict(random_scale="discrete", scale_values=(1 / 4, 1 / 3, 1 / 2))
CONTINUOUS_SCALES = dict(random_scale="continuous", scale_range=(0.25, 1.0))


@dataclass(frozen=True)
class AugmentParams:
    """One draw shared by every frame of a clip."""
    scale: float = 1.0
    # (h, w) after rescaling; None keeps the native size
    size: Optional[Tuple[int, int]] = None
    rot90: int = 0
    hflip: bool = False
    vflip: bool = False
    top: int = 0
    left: int = 0
    crop: Optional[int] = None
    # (contrast, saturation, hue shift) or None
    jitter: Optional[Tuple[float, float, float]] = None


def scaled_size(h: int, w: int, scale: float, divisor: int = 1) -> Tuple[int, int]:
    sh, sw = int(np.floor(scale * h)), int(np.floor(scale * w))
    return sh - sh % divisor, sw - sw % divisor


def draw_params(policy: AugmentationPolicy, shape: Tuple[int, int], rng: np.random.Generator) -> AugmentParams:
    h, w = shape
    scale, size = 1.0, None
    if policy.random_scale == "continuous":
        scale = float(rng.uniform(*policy.scale_range))
    elif policy.random_scale == "discrete":
        scale = float(policy.scale_values[rng.integers(len(policy.scale_values))])
    if scale != 1.0:
        h, w = size = scaled_size(h, w, scale, policy.divisor)
        if min(size) < 1:
            raise ValueError(f"scale {scale} leaves no pixels of a {shape[0]}x{shape[1]} frame")
    top = left = 0
    if policy.crop_size is not None:
        if policy.crop_size > min(h, w):
            raise ValueError(f"crop {policy.crop_size} larger than the {h}x{w} (rescaled) frame")
        top = int(rng.integers(h - policy.crop_size + 1))
        left = int(rng.integers(w - policy.crop_size + 1))
    rot = int(rng.integers(4)) if policy.rotations else 0
    hflip = vflip = False
    if policy.flips:
        hflip, vflip = bool(rng.integers(2)), bool(rng.integers(2))
    jitter = None
    if policy.photometric and rng.random() < policy.photometric_p:
        jitter = (
            float(rng.uniform(*policy.contrast)),
            float(rng.uniform(*policy.saturation)),
            float(rng.uniform(-policy.hue, policy.hue)),
        )
    return AugmentParams(scale, size, rot, hflip, vflip, top, left, policy.crop_size, jitter)


def rescale(img: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Antialiased area resampling to ``size = (h, w)``."""
    h, w = size
    return cv2.resize(np.ascontiguousarray(img), (w, h), interpolation=cv2.INTER_AREA)


def photometric_jitter(img: np.ndarray, contrast: float, saturation: float, hue: float) -> np.ndarray:
    """Contrast, saturation, then hue, each clipped to [0, 1]."""
    gray = img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype)
    img = np.clip(contrast * img + (1 - contrast) * gray.mean(), 0, 1)
    gray = img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype)
    img = np.clip(saturation * img + (1 - saturation) * gray[..., None], 0, 1)
    if hue != 0.0:
        hsv = skcolor.rgb2hsv(img)
        hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
        img = skcolor.hsv2rgb(hsv)
    return img.astype(np.float32, copy=False)


def apply_params(img: np.ndarray, p: AugmentParams) -> np.ndarray:
    out = img
    if p.size is not None:
        out = rescale(out, p.size)
    if p.crop is not None:
        out = out[p.top:p.top + p.crop, p.left:p.left + p.crop]
    if p.rot90:
        out = np.rot90(out, p.rot90)
    if p.hflip:
        out = out[:, ::-1]
    if p.vflip:
        out = out[::-1]
    if p.jitter is not None:
        out = photometric_jitter(out, *p.jitter)
    return np.ascontiguousarray(out)


def augment(clip: VideoClip, policy: AugmentationPolicy, rng: np.random.Generator,
            params: Optional[AugmentParams] = None) -> VideoClip:
    """Apply one random draw identically to every frame and the reference."""
    if params is None:
        params = draw_params(policy, clip.sharp_reference.shape[:2], rng)
    f = functools.partial(apply_params, p=params)
    warped = None if clip.warped_neighbors is None else [f(x) for x in clip.warped_neighbors]
    return replace(
        clip,
        blurry_frames=[f(x) for x in clip.blurry_frames],
        sharp_reference=f(clip.sharp_reference),
        warped_neighbors=warped,
    )


# --------------------------------------------------------------------------
# batching

def batch_iterator(index: DatasetIndex, policy: AugmentationPolicy, batch_size: int,
                   crops_per_example: int, seed: int, sequence_length: int = 5, epoch: int = 0,
                   provider=None) -> Iterator[List[VideoClip]]:
    """Yield the batches of one epoch.

    An epoch visits every valid center position once in a random order.
    Each batch holds ``batch_size // crops_per_example`` clips, each
    augmented ``crops_per_example`` times. The order and every augmentation
    draw depend only on ``(seed, epoch)``. When ``provider`` is given,
    neighbours are pre-warped at full resolution before augmentation.
    """
    if batch_size < 1 or crops_per_example < 1 or batch_size % crops_per_example:
        raise ValueError(f"batch size {batch_size} is not divisible by crops per example {crops_per_example}")
    per_batch = batch_size // crops_per_example
    centers = index.valid_centers(sequence_length)
    if not centers:
        raise DatasetError(f"no sequence is long enough for windows of {sequence_length} frames")
    rng = np.random.default_rng([seed, epoch])
    order = list(rng.permutation(len(centers)))
    short = (-len(order)) % per_batch
    if short:
        if len(centers) < per_batch:
            log.warning("only %d clips for %d per batch; sampling with replacement", len(centers), per_batch)
        order.extend(rng.integers(len(centers), size=short))
    n_batches = len(order) // per_batch
    seeds = rng.integers(2 ** 63, size=(n_batches, per_batch, crops_per_example))
    for b in range(n_batches):
        batch = []
        for k, i in enumerate(order[b * per_batch:(b + 1) * per_batch]):
            clip = sample_clip(index, *centers[i], sequence_length)
            if provider is not None:
                from .flowwarp import prewarp
                clip = prewarp(clip, provider)
            for s in seeds[b, k]:
                batch.append(augment(clip, policy, np.random.default_rng(s)))
        yield batch
