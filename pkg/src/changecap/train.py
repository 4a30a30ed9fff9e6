"""Two-stage training: AdamW, cosine schedule with linear warmup, module freezing.

A stage names the modules it trains; everything else stays bitwise untouched.
Stage defaults mirror the full-scale recipe: stage 1 trains the change
extractor at 1e-3, stage 2 trains the decoder at 1e-4, both under a cosine
schedule with a 3% warmup and cross-entropy loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import MODULE_NAMES, CaptionModel
from .rng import SplitMix64, shuffled
from .tensor import Tensor


class ConfigError(ValueError):
    """Raised for invalid stage plans or unusable datasets."""


class TrainerError(RuntimeError):
    """Raised when the optimizer contract is violated (e.g. missing gradients)."""


@dataclass
class StagePlan:
    """One training stage: which modules move, how fast, for how long."""

    name: str
    trainable_modules: tuple[str, ...]
    peak_lr: float
    epochs: int
    batch_size: int = 8
    warmup_ratio: float = 0.03
    seed: int = 0

    def __post_init__(self):
        self.trainable_modules = tuple(self.trainable_modules)
        if not self.trainable_modules:
            raise ConfigError("a stage must train at least one module")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError(f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}")
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        return cls(
            name=d["name"],
            trainable_modules=tuple(d["trainable_modules"]),
            peak_lr=float(d["peak_lr"]),
            epochs=int(d["epochs"]),
            batch_size=int(d.get("batch_size", 8)),
            warmup_ratio=float(d.get("warmup_ratio", 0.03)),
            seed=int(d.get("seed", 0)),
        )


def default_stage1(epochs: int = 10, seed: int = 0) -> StagePlan:
    return StagePlan("stage1", ("ce",), peak_lr=1e-3, epochs=epochs, seed=seed)


def default_stage2(epochs: int = 1, seed: int = 0) -> StagePlan:
    return StagePlan("stage2", ("decoder",), peak_lr=1e-4, epochs=epochs, seed=seed)


def lr_at_step(step: int, total_steps: int, peak_lr: float, warmup_ratio: float = 0.03) -> float:
    """Linear warmup to ``peak_lr`` over ceil(warmup_ratio*total) steps, then
    cosine decay to exactly 0 at ``total_steps``."""
    if total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    if step < 0 or step > total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warm = math.ceil(warmup_ratio * total_steps)
    if step < warm:
        return peak_lr * step / warm
    span = max(total_steps - warm, 1)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / span))


class AdamW:
    """Decoupled-weight-decay Adam over an explicit (name, tensor) list.

    Parameters not handed to the optimizer are frozen by construction.
    """

    def __init__(
        self,
        named_params: list[tuple[str, Tensor]],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params:
            if p.grad is None:
                raise TrainerError(f"trainable parameter {name!r} has no gradient")
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def stage_total_steps(plan: StagePlan, n_samples: int) -> int:
    return plan.epochs * math.ceil(n_samples / plan.batch_size)


def run_stage(plan: StagePlan, model: CaptionModel, dataset, log=None) -> list[dict]:
    """Train one stage; returns per-step records {"step", "lr", "loss"}.

    ``dataset`` is a sequence of (visual, prompt_ids, target_ids) items. Only
    the modules named in the plan are updated; gradients still flow through
    the frozen ones. Fully deterministic in (plan, dataset, model state).
    """
    dataset = list(dataset)
    if not dataset:
        raise ConfigError(f"stage {plan.name!r} got an empty dataset")
    for mod in plan.trainable_modules:
        if mod not in MODULE_NAMES:
            raise ConfigError(f"unknown module {mod!r}; expected subset of {list(MODULE_NAMES)}")

    trainable = model.parameters(plan.trainable_modules)
    everything = model.all_tensors()
    opt = AdamW(trainable)
    total = stage_total_steps(plan, len(dataset))
    rng = SplitMix64(plan.seed)

    from .tensor import backward, zero_grads

    records = []
    step = 0
    for _ in range(plan.epochs):
        order = shuffled(len(dataset), rng)
        for start in range(0, len(dataset), plan.batch_size):
            batch = [dataset[i] for i in order[start : start + plan.batch_size]]
            zero_grads(everything)
            loss = model.batch_loss(batch)
            backward(loss)
            step += 1
            lr = lr_at_step(step, total, plan.peak_lr, plan.warmup_ratio)
            opt.step(lr)
            record = {"step": step, "lr": lr, "loss": loss.item()}
            records.append(record)
            if log is not None:
                log(record)
    return records


def train_two_stage(
    model: CaptionModel,
    stage1: StagePlan,
    stage2: StagePlan,
    dataset1,
    dataset2=None,
    log=None,
) -> list[dict]:
    """Run stage1 then stage2 on the same model; stage2 may see a mixed dataset."""
    records = run_stage(stage1, model, dataset1, log=log)
    records += run_stage(stage2, model, dataset2 if dataset2 is not None else dataset1, log=log)
    return records
