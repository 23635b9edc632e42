"""Backward warping, flow providers and temporal input assembly.

A flow field attached to a neighbour maps reference coordinates into the
neighbour: ``warped(x, y) = neighbour(x + u(x, y), y + v(x, y))``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Mapping, Protocol, Sequence, Tuple, Union

import numpy as np

from .datapipe import VideoClip

FLO_MAGIC = 202021.25
ASSEMBLY_MODES = ("none", "rep", "cat")


class FlowError(RuntimeError):
    pass


@dataclass(frozen=True)
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError(f"u and v must be matching 2-D arrays, got {self.u.shape} and {self.v.shape}")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise ValueError("flow field contains non-finite values")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.u.shape

    @classmethod
    def constant(cls, shape, dx: float, dy: float) -> "FlowField":
        return cls(np.full(shape, float(dx), np.float32), np.full(shape, float(dy), np.float32))

    @classmethod
    def zeros(cls, shape) -> "FlowField":
        return cls.constant(shape, 0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=-1)


def read_flo(path) -> FlowField:
    """Read a Middlebury ``.flo`` file."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            magic = np.fromfile(f, "<f4", count=1)
            if magic.size != 1 or magic[0] != FLO_MAGIC:
                raise FlowError(f"{path}: bad .flo magic number")
            w, h = np.fromfile(f, "<i4", count=2)
            data = np.fromfile(f, "<f4", count=2 * w * h)
    except OSError as e:
        raise FlowError(f"cannot read flow file {path}: {e}") from e
    if w < 1 or h < 1 or data.size != 2 * w * h:
        raise FlowError(f"{path}: truncated .flo payload")
    data = data.reshape(h, w, 2)
    return FlowField(data[..., 0].copy(), data[..., 1].copy())


def write_flo(path, flow: FlowField):
    h, w = flow.shape
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], "<f4").tofile(f)
        np.array([w, h], "<i4").tofile(f)
        flow.as_array().astype("<f4").tofile(f)


def warp(neighbor: np.ndarray, flow: FlowField) -> np.ndarray:
    """Bilinear backward warp of an ``(H, W[, C])`` image, border replication."""
    neighbor = np.asarray(neighbor)
    h, w = neighbor.shape[:2]
    if flow.shape != (h, w):
        raise ValueError(f"flow {flow.shape} does not match image {(h, w)}")
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = np.clip(xs + flow.u, 0, w - 1)
    sy = np.clip(ys + flow.v, 0, h - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = sx - x0
    wy = sy - y0
    if neighbor.ndim == 3:
        wx, wy = wx[..., None], wy[..., None]
    img = neighbor.astype(np.float64, copy=False)
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(neighbor.dtype, copy=False)


# --------------------------------------------------------------------------
# providers

class FlowProvider(Protocol):
    def __call__(self, sequence_id: str, center: int, offset: int, shape: Tuple[int, int]) -> FlowField:
        ...


def flow_path(sequence_dir, center: int, offset: int) -> Path:
    return Path(sequence_dir) / "flow" / f"{center:05d}_offset{offset}.flo"


class FileFlowProvider:
    """Serves ``<directory>/<sequence>/flow/NNNNN_offset<d>.flo``."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def __call__(self, sequence_id, center, offset, shape):
        path = flow_path(self.directory / sequence_id, center, offset)
        if not path.is_file():
            raise FlowError(f"no flow for (sequence={sequence_id}, center={center}, offset={offset}): {path}")
        flow = read_flo(path)
        if flow.shape != tuple(shape):
            raise FlowError(f"{path}: flow is {flow.shape}, frames are {tuple(shape)}")
        return flow


def flow_provider_from_files(directory) -> FileFlowProvider:
    return FileFlowProvider(directory)


Trajectory = Union[np.ndarray, Sequence, Mapping[str, np.ndarray]]


class SyntheticFlowProvider:
    """Constant fields from scripted per-frame camera positions.

    Frame ``t`` shows the scene sampled at ``x + p[t]``, so the neighbour at
    ``center + offset`` maps onto the reference with flow ``p[center] - p[center + offset]``.
    ``trajectory`` is one ``(T, 2)`` position array shared by all sequences,
    or a mapping from sequence id to such arrays.
    """

    def __init__(self, trajectory: Trajectory):
        if isinstance(trajectory, Mapping):
            self._paths: Dict[str, np.ndarray] = {k: np.asarray(v, float) for k, v in trajectory.items()}
            self._shared = None
        else:
            self._paths = {}
            self._shared = np.asarray(trajectory, float)

    def positions(self, sequence_id: str) -> np.ndarray:
        if self._shared is not None:
            return self._shared
        try:
            return self._paths[sequence_id]
        except KeyError:
            raise FlowError(f"no trajectory for sequence {sequence_id!r}") from None

    def __call__(self, sequence_id, center, offset, shape):
        p = self.positions(sequence_id)
        if not (0 <= center < len(p) and 0 <= center + offset < len(p)):
            raise FlowError(f"trajectory of {sequence_id!r} does not cover frames {center} and {center + offset}")
        dx, dy = p[center] - p[center + offset]
        return FlowField.constant(shape, dx, dy)


def synthetic_flow_provider(trajectory: Trajectory) -> SyntheticFlowProvider:
    return SyntheticFlowProvider(trajectory)


def shift_trajectory(n_frames: int, step: Tuple[float, float]) -> np.ndarray:
    """Constant-velocity positions ``p[t] = t * step``."""
    return np.arange(n_frames)[:, None] * np.asarray(step, float)[None, :]


class CachedProvider:
    """Memoizes another provider; safe to share between threads."""

    def __init__(self, provider: FlowProvider):
        self.provider = provider
        self._cache: Dict[tuple, FlowField] = {}
        self._lock = threading.Lock()

    def __call__(self, sequence_id, center, offset, shape):
        key = (sequence_id, center, offset, tuple(shape))
        with self._lock:
            hit = self._cache.get(key)
        if hit is None:
            hit = self.provider(sequence_id, center, offset, shape)
            with self._lock:
                self._cache[key] = hit
        return hit


# --------------------------------------------------------------------------
# assembly

def prewarp(clip: VideoClip, provider: FlowProvider) -> VideoClip:
    """Attach the neighbours warped onto the reference frame."""
    if clip.warped_neighbors is not None:
        return clip
    shape = clip.sharp_reference.shape[:2]
    frames = dict(zip(range(-(clip.length // 2), clip.length // 2 + 1), clip.blurry_frames))
    warped = []
    for d in clip.offsets:
        try:
            flow = provider(clip.sequence_id, clip.center_index, d, shape)
        except FlowError:
            raise
        except Exception as e:
            raise FlowError(f"flow provider failed for ({clip.sequence_id}, {clip.center_index}, {d}): {e}") from e
        warped.append(warp(frames[d], flow))
    return replace(clip, warped_neighbors=warped)


def assemble_frames(clip: VideoClip, mode: str, provider: FlowProvider | None = None):
    """Frames of the stacked input, in channel order."""
    if mode not in ASSEMBLY_MODES:
        raise ValueError(f"unknown assembly mode {mode!r}, expected one of {ASSEMBLY_MODES}")
    frames = list(clip.blurry_frames)
    if mode == "none" or clip.length == 1:
        return frames
    if clip.warped_neighbors is None:
        if provider is None:
            raise FlowError(f"assembly mode {mode!r} needs a flow provider")
        clip = prewarp(clip, provider)
    warped = list(clip.warped_neighbors)
    if mode == "rep":
        half = clip.length // 2
        return warped[:half] + [clip.center] + warped[half:]
    return frames + warped


def assemble_input(clip: VideoClip, mode: str, provider: FlowProvider | None = None,
                   color: str = "rgb", standard: str = "bt601_full") -> np.ndarray:
    """Channel-first float32 stack ``(C, H, W)`` of the clip's input window.

    ``none``: the L frames; ``rep``: neighbours replaced by their warped
    versions; ``cat``: the L frames followed by the L - 1 warped neighbours.
    In ``ycbcr`` color mode each frame contributes its Y channel only.
    """
    frames = assemble_frames(clip, mode, provider)
    if color == "ycbcr":
        from .colorspace import luma
        chans = [luma(f, standard)[None] for f in frames]
    elif color == "rgb":
        chans = [np.moveaxis(f, -1, 0) for f in frames]
    else:
        raise ValueError(f"unknown color mode {color!r}")
    return np.concatenate(chans, axis=0).astype(np.float32, copy=False)


def target_of(clip: VideoClip, color: str = "rgb", standard: str = "bt601_full") -> np.ndarray:
    """Channel-first training target for ``clip``."""
    if color == "ycbcr":
        from .colorspace import luma
        return luma(clip.sharp_reference, standard)[None].astype(np.float32)
    return np.ascontiguousarray(np.moveaxis(clip.sharp_reference, -1, 0), dtype=np.float32)
