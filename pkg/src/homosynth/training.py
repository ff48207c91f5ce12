"""Supervised training: combined offset and colour-decoupling loss.

Total loss per batch::

    L = L_pred + lambda * (sum L_color + sum L_dis)

``L_pred`` sums the L1 error of every cumulative offset in the estimation
trace (summed over corners and trace entries, averaged over the batch).
The colour terms are summed over both images and the three pyramid levels.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .geometry import mace
from .model import CCNet, ModelConfig, color_histogram
from .synthesis import SynthConfig, make_sample

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 120_000
    learning_rate: float = 4e-4
    batch_size: int = 16
    loss_weight: float = 0.5
    weight_decay: float = 1e-4
    # Small enough that the colour head's ~1e-8 gradients still produce full-size steps.
    adam_eps: float = 1e-12
    pct_start: float = 0.05
    grad_clip: float = 1.0
    checkpoint_interval: int = 5000
    rng_seed: int = 0

    def __post_init__(self):
        if self.loss_weight < 0:
            raise ValueError("loss_weight must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be >= 1")


@dataclass
class LossBreakdown:
    pred: torch.Tensor
    color: torch.Tensor
    dis: torch.Tensor
    total: torch.Tensor
    weight: float

    def as_floats(self) -> dict:
        return {"L_pred": self.pred.item(), "L_color": self.color.item(),
                "L_dis": self.dis.item(), "total": self.total.item()}


# -- losses -----------------------------------------------------------------

def offset_loss(trace, gt) -> torch.Tensor:
    gt = torch.as_tensor(gt).to(trace[0])
    per_sample = sum((o - gt).abs().sum(dim=(-2, -1)) for o in trace)
    return per_sample.mean()


def abs_cosine(a, b) -> torch.Tensor:
    """Mean over positions (and batch) of |cos| between channel vectors."""
    return F.cosine_similarity(a, b, dim=1, eps=1e-8).abs().mean()


def decoupling_losses(model: CCNet, decoupled_src, decoupled_tar, img_src, img_tar):
    """Returns (sum of colour-reconstruction MSEs, sum of |cosine| terms)."""
    color = img_src.new_zeros(())
    dis = img_src.new_zeros(())
    bins = model.config.histogram_bins
    for decoupled, img in ((decoupled_src, img_src), (decoupled_tar, img_tar)):
        hist = color_histogram(img, bins)
        for level, (f_color, f_invar) in enumerate(decoupled, start=1):
            color = color + F.mse_loss(model.reconstruct_color(level, f_color), hist)
            dis = dis + abs_cosine(f_color, f_invar)
    return color, dis


def total_loss(l_pred, l_color, l_dis, weight: float) -> LossBreakdown:
    # Summed in float64 so the logged total equals the logged parts combined.
    total = l_pred.double() + weight * (l_color.double() + l_dis.double())
    return LossBreakdown(l_pred, l_color, l_dis, total, weight)


def compute_losses(model: CCNet, out, batch, weight: float) -> LossBreakdown:
    l_pred = offset_loss(out.trace, batch["gt"])
    l_color, l_dis = decoupling_losses(model, out.decoupled["src"], out.decoupled["tar"],
                                       batch["src"], batch["tar"])
    return total_loss(l_pred, l_color, l_dis, weight)


# -- data sources -----------------------------------------------------------

def collate(samples) -> dict:
    return {
        "src": torch.from_numpy(np.stack([s.src_image for s in samples]).astype(np.float32)),
        "tar": torch.from_numpy(np.stack([s.tar_image for s in samples]).astype(np.float32)),
        "gt": torch.from_numpy(np.stack([np.asarray(s.gt_offsets) for s in samples]).astype(np.float32)),
    }


class IndexedSource:
    """Batches drawn from an indexable collection of samples.

    The batch for step ``n`` depends only on ``(seed, n)``, which makes
    resumed runs replay the same data as uninterrupted ones.
    """

    def __init__(self, samples, batch_size: int, seed: int = 0, cache: bool = True):
        self.samples = samples
        self.batch_size = batch_size
        self.seed = seed
        self._cache = {} if cache else None

    def __len__(self):
        return len(self.samples)

    def _get(self, i):
        if self._cache is None:
            return self.samples[i]
        if i not in self._cache:
            self._cache[i] = self.samples[i]
        return self._cache[i]

    def batch(self, step: int) -> dict:
        n = len(self.samples)
        rng = np.random.default_rng([self.seed, step])
        idx = rng.choice(n, size=self.batch_size, replace=self.batch_size > n)
        return collate([self._get(int(i)) for i in idx])


class SynthSource:
    """On-the-fly synthesis: batch ``n`` holds samples ``n*B .. n*B+B-1`` of the stream."""

    def __init__(self, cfg: SynthConfig, contents, templates, renderer, batch_size: int,
                 seed: int | None = None, workers: int = 1):
        self.cfg, self.contents, self.templates, self.renderer = cfg, contents, templates, renderer
        self.batch_size = batch_size
        self.seed = cfg.rng_seed if seed is None else seed
        self.workers = workers
        self._pool = None

    def _make(self, index):
        return make_sample(index, self.cfg, self.contents, self.templates, self.renderer, seed=self.seed)

    def batch(self, step: int) -> dict:
        indices = range(step * self.batch_size, (step + 1) * self.batch_size)
        if self.workers > 1:
            from concurrent.futures import ThreadPoolExecutor

            if self._pool is None:
                self._pool = ThreadPoolExecutor(self.workers)
            samples = list(self._pool.map(self._make, indices))
        else:
            samples = [self._make(i) for i in indices]
        return collate(samples)


# -- trainer ----------------------------------------------------------------

@dataclass
class TrainResult:
    step: int
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def _warmup_fraction(cfg: TrainConfig) -> float:
    # The scheduler needs a warm-up phase longer than one step; short runs stretch it.
    if cfg.total_iterations == 1:
        return 0.5
    return min(max(cfg.pct_start, 1.5 / cfg.total_iterations), 0.75)


def build_schedule(optimizer, cfg: TrainConfig, last_step: int = -1):
    return torch.optim.lr_scheduler.OneCycleLR(
        optimizer, max_lr=cfg.learning_rate, total_steps=cfg.total_iterations,
        pct_start=_warmup_fraction(cfg), anneal_strategy="cos", cycle_momentum=False, last_epoch=last_step)


def build_optimizer(model, cfg: TrainConfig):
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay,
                                  eps=cfg.adam_eps)
    return optimizer, build_schedule(optimizer, cfg)


def training_state(model: CCNet, optimizer, scheduler, step: int, cfg: TrainConfig) -> dict:
    return {
        "step": step,
        "model_config": asdict(model.config),
        "image_size": model.image_size,
        "train_config": asdict(cfg),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict(),
        "scheduler": scheduler.state_dict(),
        "torch_rng": torch.get_rng_state(),
    }


def model_from_state(state: dict) -> CCNet:
    model = CCNet(ModelConfig(**state["model_config"]), image_size=state["image_size"])
    model.load_state_dict(state["model"])
    return model


def load_model(path) -> CCNet:
    model = model_from_state(load_checkpoint(path))
    model.eval()
    return model


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:07d}.pt"


def train(model: CCNet, source, cfg: TrainConfig, out_dir=None, resume_from=None,
          log_path=None, callback=None, stop_at: int | None = None) -> TrainResult:
    """Run optimizer steps until ``cfg.total_iterations``.

    ``source.batch(step)`` supplies each batch. Metrics go to ``log_path``
    (JSON lines, appended) and to the returned history; checkpoints are
    written to ``out_dir`` every ``checkpoint_interval`` steps and at the end.
    With ``resume_from`` the model, optimizer, scheduler, step counter and
    torch RNG are restored before continuing. ``stop_at`` ends the run early
    without changing the learning-rate schedule.
    """
    optimizer, scheduler = build_optimizer(model, cfg)
    step = 0
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        step = int(state["step"])
        if state["train_config"]["total_iterations"] == cfg.total_iterations:
            scheduler.load_state_dict(state["scheduler"])
        else:
            # A longer (or shorter) run: continue the schedule for the new length from ``step``.
            scheduler = build_schedule(optimizer, cfg, last_step=step - 1)
        torch.set_rng_state(state["torch_rng"])
    out_dir = Path(out_dir) if out_dir is not None else None
    if log_path is None and out_dir is not None:
        log_path = out_dir / "metrics.jsonl"
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    device = next(model.parameters()).device
    result = TrainResult(step=step)
    recent = deque(maxlen=50)
    model.train()
    logfh = open(log_path, "a") if log_path is not None else None
    try:
        end = cfg.total_iterations if stop_at is None else min(stop_at, cfg.total_iterations)
        while step < end:
            batch = {k: v.to(device) for k, v in source.batch(step).items()}
            out = model(batch["src"], batch["tar"], return_features=True)
            losses = compute_losses(model, out, batch, cfg.loss_weight)
            if not torch.isfinite(losses.total):
                dump = None
                if out_dir is not None:
                    dump = save_checkpoint(out_dir / f"nonfinite_{step:07d}.pt",
                                           training_state(model, optimizer, scheduler, step, cfg))
                raise NonFiniteLoss(f"non-finite loss at step {step}: {losses.as_floats()} (state: {dump})")
            lr = optimizer.param_groups[0]["lr"]
            optimizer.zero_grad(set_to_none=True)
            losses.total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            scheduler.step()
            step += 1

            batch_mace = float(mace(out.final.detach(), batch["gt"]).mean())
            recent.append(batch_mace)
            record = {"step": step, **losses.as_floats(), "train_mace": batch_mace,
                      "running_mace": sum(recent) / len(recent), "lr": lr}
            result.history.append(record)
            if logfh is not None:
                logfh.write(json.dumps(record) + "\n")
                logfh.flush()
            if callback is not None:
                callback(record, model)
            if out_dir is not None and (step % cfg.checkpoint_interval == 0 or step == cfg.total_iterations):
                path = save_checkpoint(out_dir / checkpoint_name(step),
                                       training_state(model, optimizer, scheduler, step, cfg))
                save_checkpoint(out_dir / "latest.pt", training_state(model, optimizer, scheduler, step, cfg))
                result.checkpoints.append(path)
    finally:
        if logfh is not None:
            logfh.close()
    result.step = step
    model.eval()
    return result


def resume(checkpoint_path, source, cfg: TrainConfig | None = None, **kwargs):
    """Rebuild the model from a checkpoint and continue training it."""
    state = load_checkpoint(checkpoint_path)
    if cfg is None:
        cfg = TrainConfig(**state["train_config"])
    model = model_from_state(state)
    return model, train(model, source, cfg, resume_from=checkpoint_path, **kwargs)


def is_finite_history(history) -> bool:
    return all(math.isfinite(r["total"]) for r in history)
