"""Adam optimizer, warmup learning-rate schedule, and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .data import DialogueExample
from .errors import ContractError, NumericalError
from .model import MitvgModel
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


def lr_at(step: int, d_model: int, warmup_steps: int) -> float:
    """Inverse-sqrt schedule with linear warmup; steps are 1-based."""
    if step < 1:
        raise ContractError(f"schedule is defined for steps >= 1, got {step}")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


class Adam:
    """Adam with bias correction; per-parameter state keyed by identity."""

    def __init__(self, params: list[Tensor], beta1: float = 0.9, beta2: float = 0.98,
                 eps: float = 1e-9):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


@dataclass
class TrainRecord:
    step: int
    loss: float
    lr: float


@dataclass
class TrainResult:
    steps: int
    records: list[TrainRecord] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss if self.records else float("nan")


def training_instances(examples: list[DialogueExample]) -> list[tuple[int, int]]:
    """Every (example index, round number) pair with a trainable answer."""
    out = []
    for idx, ex in enumerate(examples):
        for t in range(1, len(ex.rounds) + 1):
            if ex.rounds[t - 1].answer:
                out.append((idx, t))
    return out


def train(model: MitvgModel, examples: list[DialogueExample], steps: int,
          seed: int = 0, use_vg: Optional[bool] = None,
          log_every: int = 50,
          on_step: Optional[Callable[[TrainRecord], None]] = None) -> TrainResult:
    """Run ``steps`` single-instance updates over the dialogue corpus.

    Instances are visited in a seeded shuffle, reshuffled each epoch, so a
    fixed (model seed, data, steps, seed) tuple reproduces the same
    parameters bit for bit.  A non-finite loss aborts with the step number.
    """
    if steps < 0:
        raise ContractError("steps must be >= 0")
    instances = training_instances(examples)
    if not instances and steps > 0:
        raise ContractError("no trainable instances in the dataset")
    params = model.parameters()
    opt = Adam(params)
    order_rng = np.random.default_rng(seed)
    result = TrainResult(steps=steps)
    accum = max(1, model.config.grad_accum)

    cursor = 0
    order = order_rng.permutation(len(instances))
    for step in range(1, steps + 1):
        model.zero_grad()
        micro_losses = []
        for _ in range(accum):
            if cursor >= len(order):
                order = order_rng.permutation(len(instances))
                cursor = 0
            ex_idx, t = instances[order[cursor]]
            cursor += 1
            with Tape() as tape:
                loss = model.forward_loss(examples[ex_idx], t, use_vg=use_vg)
                if accum > 1:
                    loss = T.scale(loss, 1.0 / accum)
                T.backward(loss, tape)
            micro_losses.append(float(loss.data) * (accum if accum > 1 else 1))
        loss_value = sum(micro_losses) / len(micro_losses)
        if not np.isfinite(loss_value):
            raise NumericalError(f"non-finite loss at step {step}")
        lr = lr_at(step, model.config.d_model, model.config.warmup_steps)
        opt.step(lr)
        record = TrainRecord(step=step, loss=loss_value, lr=lr)
        result.records.append(record)
        if on_step is not None:
            on_step(record)
        if log_every and (step % log_every == 0 or step == steps):
            log.info("step %d/%d loss %.4f lr %.2e", step, steps, loss_value, lr)
    return result
