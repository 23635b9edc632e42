"""Test-set evaluation, gradient statistics and ablation tables."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import colorspace
from .datapipe import DatasetIndex, rescale, sample_clip
from .flowwarp import assemble_input
from .metrics import min_mssim_size, mssim, psnr

REPORT_NOTES = (
    "plain PSNR (peak 1.0, no alignment search); identical images capped at 100 dB",
    "frames without a full temporal window are skipped",
)


@dataclass
class SequenceMetrics:
    sequence_id: str
    psnr: float
    mssim: float
    frames: int


@dataclass
class MetricReport:
    run_id: str
    per_sequence: List[SequenceMetrics]
    psnr: float
    mssim: float
    fingerprint: str = ""
    axes: dict = field(default_factory=dict)
    notes: List[str] = field(default_factory=lambda: list(REPORT_NOTES))

    CSV_FIELDS = ("run_id", "sequence_id", "psnr", "mssim", "frames")

    def rows(self):
        for s in self.per_sequence:
            yield (self.run_id, s.sequence_id, s.psnr, s.mssim, s.frames)
        yield (self.run_id, "avg", self.psnr, self.mssim, sum(s.frames for s in self.per_sequence))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_FIELDS)
        for r in self.rows():
            w.writerow([f"{v:.4f}" if isinstance(v, float) else v for v in r])
        return buf.getvalue()

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(_nan_to_none(d), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        d["per_sequence"] = [SequenceMetrics(**{k: (math.nan if v is None else v) for k, v in s.items()})
                             for s in d["per_sequence"]]
        if d.get("mssim") is None:
            d["mssim"] = math.nan
        return cls(**d)

    def write(self, out_dir, fmt: str = "both") -> List[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        if fmt in ("csv", "both"):
            p = out_dir / "report.csv"
            p.write_text(self.to_csv())
            written.append(p)
        if fmt in ("json", "both"):
            p = out_dir / "report.json"
            p.write_text(self.to_json())
            written.append(p)
        return written


def _nan_to_none(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


# --------------------------------------------------------------------------
# inference

def predict(model, x: np.ndarray) -> np.ndarray:
    """Clamped prediction for one ``(C, H, W)`` input, padded to the model's divisor."""
    d = model.config.divisor
    h, w = x.shape[-2:]
    ph, pw = (-h) % d, (-w) % d
    param = next(model.parameters())
    t = torch.as_tensor(np.ascontiguousarray(x), dtype=param.dtype)[None]
    if ph or pw:
        t = F.pad(t, (0, pw, 0, ph), mode="replicate")
    with torch.no_grad():
        y = model(t, test_time=True)[0, :, :h, :w]
    return np.moveaxis(y.numpy(), 0, -1)


def evaluate(model, index: DatasetIndex, assembly: str = "none", provider=None, color: str = "rgb",
             sequence_length: int = 5, standard: str = "bt601_full", run_id: str = "",
             axes: Optional[dict] = None, fingerprint: str = "", with_mssim: bool = True) -> MetricReport:
    """Score ``model`` on every center frame with a full window.

    Per-frame scores are averaged per sequence; the aggregate is the
    unweighted mean over sequences. MSSIM is NaN for frames smaller than
    the five-scale minimum.
    """
    from .model import input_channels

    expected = input_channels(sequence_length, assembly, color)
    if model.config.in_channels != expected:
        raise ValueError(f"model takes {model.config.in_channels} channels but {assembly!r} assembly of "
                         f"{sequence_length} {color} frames gives {expected}")
    was_training = model.training
    model.eval()
    per_seq = []
    try:
        by_seq = {}
        for seq_id, c in index.valid_centers(sequence_length):
            by_seq.setdefault(seq_id, []).append(c)
        for seq_id, centers in by_seq.items():
            ps, ms = [], []
            for c in centers:
                clip = sample_clip(index, seq_id, c, sequence_length)
                out = predict(model, assemble_input(clip, assembly, provider, color, standard))
                if color == "ycbcr":
                    out = colorspace.reconstruct(out[..., 0], clip.center, standard)
                gt = clip.sharp_reference
                ps.append(psnr(out, gt))
                if with_mssim and min(gt.shape[:2]) >= min_mssim_size():
                    ms.append(mssim(out, gt))
                else:
                    ms.append(math.nan)
            per_seq.append(SequenceMetrics(seq_id, float(np.mean(ps)), float(np.mean(ms)), len(ps)))
    finally:
        model.train(was_training)
    if not per_seq:
        raise ValueError(f"no frame of {index.root} has a full {sequence_length}-frame window")
    return MetricReport(
        run_id=run_id,
        per_sequence=per_seq,
        psnr=float(np.mean([s.psnr for s in per_seq])),
        mssim=float(np.mean([s.mssim for s in per_seq])),
        fingerprint=fingerprint,
        axes=dict(axes or {}),
    )


# --------------------------------------------------------------------------
# gradient statistics

@dataclass
class GradientHistogram:
    edges: np.ndarray
    blurry: np.ndarray
    sharp: np.ndarray
    scale: float

    def tail_mass(self, threshold: float = 0.1):
        """Fraction of |gradient| above ``threshold`` for (blurry, sharp)."""
        centers = 0.5 * (self.edges[1:] + self.edges[:-1])
        tail = np.abs(centers) > threshold
        return (float(self.blurry[tail].sum() / self.blurry.sum()),
                float(self.sharp[tail].sum() / self.sharp.sum()))

    def tail_ratio(self, threshold: float = 0.1) -> float:
        """Sharp over blurry tail mass; 1 means indistinguishable statistics."""
        b, s = self.tail_mass(threshold)
        return s / b if b > 0 else math.inf

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "blurry", "sharp"])
        for lo, hi, b, s in zip(self.edges[:-1], self.edges[1:], self.blurry, self.sharp):
            w.writerow([f"{lo:.6f}", f"{hi:.6f}", int(b), int(s)])
        return buf.getvalue()

    def plot(self, path):
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        centers = 0.5 * (self.edges[1:] + self.edges[:-1])
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.semilogy(centers, np.maximum(self.blurry, 1), color="tab:blue", label="blurry")
        ax.semilogy(centers, np.maximum(self.sharp, 1), color="tab:red", label="sharp")
        ax.set_xlabel("gradient")
        ax.set_ylabel("count")
        ax.set_title(f"scale {self.scale:g}")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


def _gray(img):
    img = np.asarray(img, dtype=np.float64)
    return colorspace.luma(img) if img.ndim == 3 else img


def image_gradients(img: np.ndarray) -> np.ndarray:
    """Horizontal and vertical forward differences, flattened together."""
    g = _gray(img)
    return np.concatenate([np.diff(g, axis=1).ravel(), np.diff(g, axis=0).ravel()])


def gradient_statistics(blurry: Sequence[np.ndarray], sharp: Sequence[np.ndarray], scale: float = 1.0,
                        bins: int = 201, limit: float = 1.0) -> GradientHistogram:
    """Shared-edge gradient histograms of a blurry and a sharp image set."""
    if len(blurry) == 0 or len(sharp) == 0:
        raise ValueError("gradient statistics need nonempty blurry and sharp sets")
    if not 0 < scale <= 1:
        raise ValueError(f"scale must be in (0, 1], got {scale}")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    edges = np.linspace(-limit, limit, bins + 1)

    def hist(images):
        counts = np.zeros(bins, dtype=np.int64)
        for img in images:
            img = np.asarray(img, dtype=np.float32)
            if scale != 1.0:
                h, w = img.shape[:2]
                img = rescale(img, (max(int(scale * h), 2), max(int(scale * w), 2)))
            g = np.clip(image_gradients(img), -limit, limit)
            counts += np.histogram(g, bins=edges)[0]
        return counts

    return GradientHistogram(edges, hist(blurry), hist(sharp), float(scale))


# --------------------------------------------------------------------------
# ablation table

AXIS_HEADERS = {
    "output_activation": "Output activation",
    "initialization": "Initialization",
    "color_space": "Color space",
    "schedule": "Schedule",
    "random_photometric": "Random photom.",
    "random_scales": "Random scales",
    "flow": "Flow",
    "random_crops": "Random crops",
    "sequence_length": "Sequence length",
}


@dataclass
class AblationTable:
    columns: List[str]
    rows: List[list]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        w.writerows(self.rows)
        return buf.getvalue()

    def to_markdown(self) -> str:
        def cell(v):
            if isinstance(v, bool):
                return "yes" if v else "no"
            if isinstance(v, float):
                return "-" if math.isnan(v) else f"{v:.2f}"
            return str(v)

        lines = ["| " + " | ".join(self.columns) + " |", "|" + "---|" * len(self.columns)]
        lines += ["| " + " | ".join(cell(v) for v in r) + " |" for r in self.rows]
        return "\n".join(lines) + "\n"


def ablation_report(reports: Sequence[MetricReport]) -> AblationTable:
    """One row per run, in the given order; axes columns then PSNR and MSSIM."""
    if not reports:
        raise ValueError("ablation report needs at least one run")
    seen = set()
    for r in reports:
        if r.run_id in seen:
            raise ValueError(f"duplicate run id {r.run_id!r}")
        seen.add(r.run_id)
    keys = list(AXIS_HEADERS)
    keys += [k for r in reports for k in r.axes if k not in keys]
    columns = ["run"] + [AXIS_HEADERS.get(k, k) for k in keys] + ["PSNR", "MSSIM"]
    rows = [[r.run_id] + [r.axes.get(k, "") for k in keys] + [round(r.psnr, 4), round(r.mssim, 4)]
            for r in reports]
    return AblationTable(columns, rows)
