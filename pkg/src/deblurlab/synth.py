"""Desk-scale synthetic video deblurring data.

A procedural scene is filmed by a camera translating at integer
sub-frame steps. Each video frame averages ``subframes`` consecutive
sub-frames (the blurry frame); the middle sub-frame is the sharp
reference. With constant velocity all blurry frames are exact integer
translations of each other, so the stored flow is exact as well.

Two optional effects make the data closer to handheld footage. ``gain``
scales scene radiance around mid-gray before the sensor clips to [0, 1],
which saturates highlights and shadows. ``exposure="varying"`` draws a
per-frame exposure (an odd sub-frame count up to ``subframes``) centered
on the same sub-frame, so blur length changes from frame to frame while
frame positions, and hence the flow, stay exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .datapipe import save_image
from .flowwarp import FlowField, flow_path, write_flo


@dataclass
class SynthSpec:
    sequences: int = 4
    frames: int = 20
    height: int = 128
    width: int = 128
    subframes: int = 7
    trajectory: str = "linear"
    max_offset: int = 3
    seed: int = 0
    gain: float = 1.0
    exposure: str = "fixed"


def parse_trajectory(name: str, rng: np.random.Generator) -> np.ndarray:
    """Per-sub-frame integer step ``(dx, dy)`` for one sequence."""
    if name == "static":
        return np.zeros(2, dtype=int)
    if name == "linear":
        steps = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if (dx, dy) != (0, 0)]
        return np.array(steps[rng.integers(len(steps))], dtype=int)
    try:
        dx, dy = (int(s) for s in name.split(","))
    except ValueError:
        raise ValueError(f"trajectory must be 'linear', 'static' or 'dx,dy', got {name!r}") from None
    return np.array([dx, dy], dtype=int)


def procedural_scene(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth background with random rectangles, discs and stripe patches."""
    yy, xx = np.mgrid[0:h, 0:w]
    ys, xs = yy / max(h, w), xx / max(h, w)
    c0, c1 = rng.uniform(0.2, 0.8, size=(2, 3))
    img = c0 + (c1 - c0) * (0.5 * xs + 0.5 * ys)[..., None]
    area = h * w
    for _ in range(max(8, area // 1500)):
        kind = rng.integers(3)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(3, 20)
        col = rng.uniform(0, 1, 3)
        if kind == 0:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < rng.uniform(0.3, 1.5) * r)
            img[mask] = col
        elif kind == 1:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
            img[mask] = col
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r)
            theta = rng.uniform(0, np.pi)
            period = rng.uniform(3, 9)
            s = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period)
            img[mask] = (s[..., None] * col + (1 - s[..., None]) * (1 - col))[mask]
    return np.clip(img, 0, 1)


def frame_positions(frames: int, subframes: int, step) -> np.ndarray:
    """Camera position of each sharp reference (the middle sub-frame)."""
    t = np.arange(frames) * subframes + subframes // 2
    return t[:, None] * np.asarray(step)[None, :]


def _sensor(radiance: np.ndarray, gain: float) -> np.ndarray:
    if gain == 1.0:
        return radiance
    return np.clip(0.5 + gain * (radiance - 0.5), 0.0, 1.0)


def render_sequence(spec: SynthSpec, rng: np.random.Generator):
    """Return ``(blurry, sharp, positions)`` for one sequence."""
    step = parse_trajectory(spec.trajectory, rng)
    n_sub = spec.frames * spec.subframes
    travel = np.abs(step) * (n_sub - 1)
    scene = procedural_scene(spec.height + travel[1], spec.width + travel[0], rng)
    # origin so that every sub-frame crop stays inside the scene
    ox = travel[0] if step[0] < 0 else 0
    oy = travel[1] if step[1] < 0 else 0

    def crop(j):
        x, y = ox + j * step[0], oy + j * step[1]
        return scene[y:y + spec.height, x:x + spec.width]

    mid = spec.subframes // 2
    widest = min(mid, spec.subframes - 1 - mid)
    blurry, sharp = [], []
    for t in range(spec.frames):
        if spec.exposure == "fixed":
            ks = range(spec.subframes)
        else:
            half = int(rng.integers(widest + 1))
            ks = range(mid - half, mid + half + 1)
        # the sensor integrates radiance, then clips
        blurry.append(_sensor(np.mean([crop(t * spec.subframes + k) for k in ks], axis=0), spec.gain))
        sharp.append(_sensor(crop(t * spec.subframes + mid), spec.gain))
    return blurry, sharp, frame_positions(spec.frames, spec.subframes, step)


def generate(output_root, spec: Optional[SynthSpec] = None, split: str = "train") -> Path:
    """Write ``spec.sequences`` sequences plus exact flow files under ``output_root/split``."""
    spec = spec or SynthSpec()
    if spec.frames < 1 or spec.sequences < 1 or spec.subframes < 1:
        raise ValueError("sequences, frames and subframes must be >= 1")
    if spec.exposure not in ("fixed", "varying"):
        raise ValueError(f"exposure must be 'fixed' or 'varying', got {spec.exposure!r}")
    if spec.gain <= 0:
        raise ValueError("gain must be positive")
    root = Path(output_root) / split
    ss = np.random.SeedSequence(spec.seed)
    for i, child in enumerate(ss.spawn(spec.sequences)):
        rng = np.random.default_rng(child)
        blurry, sharp, pos = render_sequence(spec, rng)
        seq_dir = root / f"seq{i:03d}"
        for sub in ("blurry", "sharp", "flow"):
            (seq_dir / sub).mkdir(parents=True, exist_ok=True)
        for t, (b, s) in enumerate(zip(blurry, sharp)):
            save_image(seq_dir / "blurry" / f"{t:05d}.png", b)
            save_image(seq_dir / "sharp" / f"{t:05d}.png", s)
        for t in range(spec.frames):
            for d in range(-spec.max_offset, spec.max_offset + 1):
                if d == 0 or not 0 <= t + d < spec.frames:
                    continue
                dx, dy = pos[t] - pos[t + d]
                write_flo(flow_path(seq_dir, t, d), FlowField.constant((spec.height, spec.width), dx, dy))
        (seq_dir / "trajectory.json").write_text(json.dumps({"positions": pos.tolist()}))
    return root


def load_trajectories(split_root) -> dict:
    """Sequence id -> frame positions, for a synthetic flow provider."""
    out = {}
    for p in sorted(Path(split_root).glob("*/trajectory.json")):
        out[p.parent.name] = np.asarray(json.loads(p.read_text())["positions"], float)
    return out
