"""SSE training with Adam, step-halving schedules, checkpoints and manifests."""

from __future__ import annotations

import logging
import math
import platform
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, List, Optional

import numpy as np
import torch

from . import __version__
from .config import RunConfig, dump_config
from .datapipe import AugmentationPolicy, DatasetIndex, batch_iterator, scan_dataset
from .flowwarp import CachedProvider, FileFlowProvider, SyntheticFlowProvider, assemble_input, target_of
from .model import Backbone, ModelConfig, build_backbone

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# schedules

@dataclass(frozen=True)
class ScheduleSpec:
    total_epochs: int
    base_lr: float = 0.005
    halving_epochs: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "halving_epochs", tuple(self.halving_epochs))
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        h = self.halving_epochs
        if any(b <= a for a, b in zip(h, h[1:])):
            raise ValueError(f"halving epochs must be strictly increasing: {h}")
        if h and (h[0] < 0 or h[-1] >= self.total_epochs):
            raise ValueError(f"halving epochs must lie in [0, {self.total_epochs})")


SHORT = ScheduleSpec(116, 0.005, (32, 44, 56, 68, 80, 92, 104))
LONG = ScheduleSpec(216, 0.005, (108, 126, 144, 162, 180, 198))
# three times the long schedule for the smaller Nah et al. training set
NAH = ScheduleSpec(608, 0.005, (308, 358, 408, 458, 508, 558))
PRESETS = {"short": SHORT, "long": LONG, "nah": NAH}


def lr_at_epoch(spec: ScheduleSpec, epoch: int) -> float:
    if not 0 <= epoch < spec.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {spec.total_epochs})")
    k = sum(1 for e in spec.halving_epochs if e <= epoch)
    return spec.base_lr * 2.0 ** -k


def schedule_from_config(cfg: RunConfig) -> ScheduleSpec:
    s = cfg.schedule
    if s.preset == "custom":
        if s.total_epochs is None:
            raise ValueError("custom schedule needs schedule.total_epochs")
        return ScheduleSpec(s.total_epochs, s.base_lr, tuple(s.halving_epochs or ()))
    base = PRESETS[s.preset]
    return ScheduleSpec(
        s.total_epochs if s.total_epochs is not None else base.total_epochs,
        s.base_lr,
        tuple(s.halving_epochs) if s.halving_epochs is not None else base.halving_epochs,
    )


# --------------------------------------------------------------------------
# loss

def sse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Squared error summed within each example, averaged over the batch."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = (pred - target).reshape(pred.shape[0], -1)
    return (diff * diff).sum(dim=1).mean()


# --------------------------------------------------------------------------
# state and checkpoints

@dataclass
class TrainState:
    model: Backbone
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    iteration: int = 0
    best_psnr: float = -math.inf
    losses: List[float] = field(default_factory=list)

    def state_dict(self, cfg: Optional[RunConfig] = None) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "model_config": self.model.config.to_dict(),
            "run_config": None if cfg is None else cfg.to_dict(),
            "seed": None if cfg is None else cfg.seed,
            "epoch": self.epoch,
            "iteration": self.iteration,
            "best_psnr": self.best_psnr,
            "losses": list(self.losses),
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
        }


def make_optimizer(model: torch.nn.Module, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def save_checkpoint(path, state: TrainState, cfg: Optional[RunConfig] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(state.state_dict(cfg), tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise TrainingError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(ckpt, dict) or "format_version" not in ckpt:
        raise TrainingError(f"{path} is not a checkpoint of this package")
    if ckpt["format_version"] != CHECKPOINT_VERSION:
        raise TrainingError(f"{path}: checkpoint version {ckpt['format_version']}, expected {CHECKPOINT_VERSION}")
    return ckpt


def load_model(path) -> Backbone:
    """Model with checkpointed weights, in eval mode."""
    ckpt = read_checkpoint(path)
    model = build_backbone(ModelConfig.from_dict(ckpt["model_config"]), seed=None)
    model.load_state_dict(ckpt["model"])
    return model.eval()


def resume(path, model_config: Optional[ModelConfig] = None) -> TrainState:
    """Rebuild model, optimizer and counters from a checkpoint.

    When ``model_config`` is given it must match the stored one.
    """
    ckpt = read_checkpoint(path)
    stored = ModelConfig.from_dict(ckpt["model_config"])
    if model_config is not None and model_config != stored:
        raise TrainingError(f"checkpoint {path} was trained with {stored}, not {model_config}")
    model = build_backbone(stored, seed=None)
    model.load_state_dict(ckpt["model"])
    opt = make_optimizer(model, 1.0)
    opt.load_state_dict(ckpt["optimizer"])
    return TrainState(model, opt, ckpt["epoch"], ckpt["iteration"], ckpt["best_psnr"], list(ckpt["losses"]))


# --------------------------------------------------------------------------
# loop

def prefetch(iterable: Iterable, depth: int):
    """Run ``iterable`` in a worker thread, at most ``depth`` items ahead."""
    if depth <= 0:
        yield from iterable
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()
    done = object()

    def work():
        try:
            for item in iterable:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        pass
                if stop.is_set():
                    return
            q.put(done)
        except BaseException as e:  # re-raised in the consumer
            q.put(e)

    t = threading.Thread(target=work, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is done:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()


def to_tensors(batch, assembly, provider, color, standard, dtype=torch.float32):
    x = np.stack([assemble_input(c, assembly, provider, color, standard) for c in batch])
    y = np.stack([target_of(c, color, standard) for c in batch])
    return torch.from_numpy(x).to(dtype), torch.from_numpy(y).to(dtype)


def make_provider(cfg: RunConfig, index: DatasetIndex):
    if cfg.flow.mode == "none" or cfg.data.sequence_length == 1:
        return None
    if cfg.flow.source == "synthetic":
        from .synth import load_trajectories
        traj = load_trajectories(cfg.flow.directory or index.root)
        if not traj:
            raise TrainingError(f"no trajectory.json files under {cfg.flow.directory or index.root}")
        return SyntheticFlowProvider(traj)
    return CachedProvider(FileFlowProvider(cfg.flow.directory or index.root))


def augmentation_policy(cfg: RunConfig, divisor: int) -> AugmentationPolicy:
    a = cfg.augmentation
    return AugmentationPolicy(
        rotations=a.rotations, flips=a.flips, crop_size=a.crop_size,
        photometric=a.photometric, photometric_p=a.photometric_p,
        random_scale=a.random_scale, scale_range=tuple(a.scale_range),
        scale_values=tuple(a.scale_values), divisor=divisor,
    )


def set_determinism(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def environment_info() -> dict:
    bn = torch.nn.BatchNorm2d(1)
    return {
        "package": __version__,
        "python": platform.python_version(),
        "torch": str(torch.__version__),
        "numpy": np.__version__,
        "batch_norm": {"eps": bn.eps, "momentum": bn.momentum},
        "adam": {"betas": list(ADAM_BETAS), "eps": ADAM_EPS},
        "epoch_definition": "one pass over all valid center positions of the training split",
        "loss": "SSE summed per example, mean over the batch",
        "architecture_note": "parameterized hourglass with additive skips; approximates the DBN layer table",
    }


@dataclass
class TrainResult:
    final_checkpoint: Path
    manifest: Path
    state: TrainState
    seconds: float

    @property
    def losses(self) -> List[float]:
        return self.state.losses


def _fingerprint(cfg: RunConfig) -> str:
    import hashlib
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:12]


def write_manifest(path, cfg: RunConfig, state: TrainState, extra: Optional[dict] = None) -> Path:
    info = {
        "axes": cfg.axes(),
        "fingerprint": _fingerprint(cfg),
        "model_config": state.model.config.to_dict(),
        "epochs_completed": state.epoch,
        "iterations": state.iteration,
        "final_loss": state.losses[-1] if state.losses else None,
        "best_val_psnr": None if math.isinf(state.best_psnr) else state.best_psnr,
        "environment": environment_info(),
    }
    if extra:
        info.update(extra)
    path = Path(path)
    path.write_text(dump_config(cfg, {"manifest": info}))
    return path


def train(cfg: RunConfig, resume_from=None, on_step: Optional[Callable[[int, float], None]] = None,
          dtype=torch.float32) -> TrainResult:
    """Run the configured training and write checkpoints plus a manifest.

    Batches for epoch ``e`` depend only on ``(seed, e)``, so a run resumed
    from an epoch-boundary checkpoint replays the uninterrupted one.
    """
    t0 = time.time()
    if cfg.data.root is None:
        raise TrainingError("data.root is not set")
    set_determinism(cfg.seed)
    out_dir = Path(cfg.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(dump_config(cfg))

    index = scan_dataset(cfg.data.root, cfg.data.train_split)
    provider = make_provider(cfg, index)
    val_index = scan_dataset(cfg.data.root, cfg.data.val_split) if cfg.data.val_split else None
    spec = schedule_from_config(cfg)
    mc = cfg.model_config()
    policy = augmentation_policy(cfg, mc.divisor)

    if resume_from is not None:
        state = resume(resume_from, mc)
        state.model.to(dtype)
    else:
        model = build_backbone(mc, seed=cfg.seed).to(dtype)
        state = TrainState(model, make_optimizer(model, spec.base_lr))
    model, opt = state.model, state.optimizer
    model.train()
    color, standard = cfg.model.color_space, cfg.model.ycbcr_standard
    max_it = cfg.schedule.max_iterations

    def batches(epoch):
        it = batch_iterator(index, policy, cfg.data.batch_size, cfg.data.crops_per_example, cfg.seed,
                            cfg.data.sequence_length, epoch, provider)
        return (to_tensors(b, cfg.flow.mode, provider, color, standard, dtype) for b in it)

    while state.epoch < spec.total_epochs and (max_it is None or state.iteration < max_it):
        lr = lr_at_epoch(spec, state.epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        for x, y in prefetch(batches(state.epoch), cfg.output.prefetch):
            loss = sse_loss(model(x), y)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss.item()} at epoch {state.epoch}, iteration {state.iteration} (lr {lr})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            state.iteration += 1
            state.losses.append(float(loss.item()))
            if on_step is not None:
                on_step(state.iteration, state.losses[-1])
            if max_it is not None and state.iteration >= max_it:
                break
        else:
            state.epoch += 1
            _end_of_epoch(cfg, state, val_index, provider, out_dir)
            continue
        break  # stopped mid-epoch on max_iterations

    final = save_checkpoint(out_dir / "final.pt", state, cfg)
    manifest = write_manifest(out_dir / "manifest.yaml", cfg, state, {"seconds": round(time.time() - t0, 2)})
    np.savetxt(out_dir / "losses.csv", np.asarray(state.losses), fmt="%.8g", header="loss", comments="")
    return TrainResult(final, manifest, state, time.time() - t0)


def _end_of_epoch(cfg, state, val_index, provider, out_dir):
    save_checkpoint(out_dir / "last.pt", state, cfg)
    every = cfg.output.checkpoint_every
    if every and state.epoch % every == 0:
        save_checkpoint(out_dir / f"epoch_{state.epoch:04d}.pt", state, cfg)
    if val_index is None or not cfg.eval.val_every or state.epoch % cfg.eval.val_every:
        return
    from .evaluator import evaluate

    val_provider = make_provider(cfg, val_index) if provider is not None else None
    rep = evaluate(state.model, val_index, cfg.flow.mode, val_provider, cfg.model.color_space,
                   cfg.data.sequence_length, cfg.model.ycbcr_standard, with_mssim=False)
    state.model.train()
    log.info("epoch %d: val PSNR %.3f dB", state.epoch, rep.psnr)
    if rep.psnr > state.best_psnr:
        state.best_psnr = rep.psnr
        save_checkpoint(out_dir / "best.pt", state, cfg)
