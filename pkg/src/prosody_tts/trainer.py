"""Adam with warmup, parameter-group freezing and refinement strategies."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tc
from .config import PARAM_GROUPS, ModelConfig, TrainConfig, replace
from .errors import ConfigurationError, InputError, TrainingDivergedError
from .loss import LossBreakdown
from .model import ModelParams, ProsodyTTS, make_batch

CURVE_FIELDS = ("step", "l_spec", "l_stop", "l_prosody", "total", "lr")
STRATEGIES = ("full", "encoder_only", "encoder_plus_cross_attention")


def noam_rate(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    """``scale * d^-0.5 * min(step^-0.5, step * warmup^-1.5)`` with steps counted from 1."""
    step = max(step, 1)
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class CurvePoint:
    step: int
    loss: LossBreakdown
    lr: float

    def row(self) -> list:
        return [self.step, self.loss.l_spec, self.loss.l_stop, self.loss.l_prosody, self.loss.total, self.lr]


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class TrainResult:
    params: ModelParams
    curve: list[CurvePoint]
    step: int
    adam: AdamState


def frozen_parameter_names(params: ModelParams, frozen_groups: Sequence[str],
                           exempt: Callable[[str], bool] | None = None) -> set[str]:
    groups = set(frozen_groups)
    return {n for n in params.names()
            if params.group_of(n) in groups and not (exempt is not None and exempt(n))}


def _batches(n_items: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches; each epoch is a fresh permutation."""
    while True:
        order = rng.permutation(n_items)
        for i in range(0, n_items, batch_size):
            yield order[i:i + batch_size]


def train(items: Sequence, model_config: ModelConfig, config: TrainConfig,
          params: ModelParams | None = None, adam: AdamState | None = None,
          frozen: set[str] | None = None, on_step: Callable[[CurvePoint], None] | None = None) -> TrainResult:
    """Run ``config.max_steps`` Adam steps on ``items`` (training tuples or objects with ``as_tuple``).

    Parameters named in ``frozen`` (default: every tensor of
    ``config.frozen_groups``) are never read into the optimizer, so they stay
    bit-identical and get no moment buffers. Resuming passes ``params`` and
    ``adam`` from an earlier run; the step counter continues from ``adam.step``.
    """
    if not items:
        raise InputError("training corpus is empty")
    config.validate()
    tuples = [it.as_tuple() if hasattr(it, "as_tuple") else it for it in items]
    model = ProsodyTTS(model_config, params.copy() if params is not None else None, seed=config.seed)
    params = model.params
    if frozen is None:
        frozen = frozen_parameter_names(params, config.frozen_groups)
    trainable = [n for n in params.names() if n not in frozen]
    adam = AdamState(adam.step, {n: a.copy() for n, a in adam.m.items() if n in trainable},
                     {n: a.copy() for n, a in adam.v.items() if n in trainable}) if adam else AdamState()
    for name in trainable:
        adam.m.setdefault(name, np.zeros_like(params[name].data))
        adam.v.setdefault(name, np.zeros_like(params[name].data))
    for name in frozen:
        params[name]._tracked = False
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, adam.step]))
    stream = _batches(len(tuples), config.batch_size, rng)
    dropout_rng = np.random.default_rng(np.random.SeedSequence([config.seed, adam.step, 1]))
    curve: list[CurvePoint] = []
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    try:
        for _ in range(config.max_steps):
            step = adam.step + 1
            batch = make_batch([tuples[i] for i in next(stream)])
            params.zero_grad()
            with tc.Tape():
                breakdown, total, _ = model.forward_train(batch, config.alpha, config.beta, dropout_rng)
                if not math.isfinite(breakdown.total):
                    raise TrainingDivergedError(step)
                if trainable:
                    tc.backward(total)
            lr = noam_rate(step, model_config.d_model, config.warmup_steps, config.learning_rate)
            grads = {n: params[n].grad if params[n].grad is not None else np.zeros_like(params[n].data)
                     for n in trainable}
            norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
            if not math.isfinite(norm):
                raise TrainingDivergedError(step)
            clip = config.grad_clip / norm if config.grad_clip > 0 and norm > config.grad_clip else 1.0
            c1, c2 = 1 - b1 ** step, 1 - b2 ** step
            for n in trainable:
                g = grads[n] * np.float32(clip)
                m, v = adam.m[n], adam.v[n]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                update = (lr / c1) * m / (np.sqrt(v / c2) + eps)
                params[n].data = (params[n].data - update).astype(params[n].data.dtype)
            adam.step = step
            point = CurvePoint(step, breakdown, lr)
            curve.append(point)
            if on_step is not None:
                on_step(point)
    finally:
        for name in frozen:
            params[name]._tracked = True
        params.zero_grad()
    return TrainResult(params, curve, adam.step, adam)


def strategy_freezing(strategy: str, params: ModelParams) -> tuple[tuple[str, ...], set[str]]:
    """Map a refinement strategy to (frozen groups, frozen tensor names)."""
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown refinement strategy {strategy!r}; choose from {list(STRATEGIES)}")
    if strategy == "full":
        return (), set()
    groups = ("decoder",)
    exempt = (lambda n: ".cross_attn." in n) if strategy == "encoder_plus_cross_attention" else None
    return groups, frozen_parameter_names(params, groups, exempt)


def refine(params: ModelParams, items: Sequence, model_config: ModelConfig, config: TrainConfig,
           strategy: str = "encoder_only", on_step=None) -> TrainResult:
    """Continue training pretrained ``params`` on new data under a freezing strategy.

    Speaker and style ids in ``items`` must fit the pretrained tables.
    """
    for it in items:
        _, spk, sty, *_ = it.as_tuple() if hasattr(it, "as_tuple") else it
        if spk >= model_config.n_speakers or sty >= model_config.n_styles:
            raise ConfigurationError(f"speaker {spk} / style {sty} exceeds the pretrained tables "
                                     f"({model_config.n_speakers} speakers, {model_config.n_styles} styles)")
    groups, _ = strategy_freezing(strategy, params)
    config = replace(config, frozen_groups=tuple(sorted(set(config.frozen_groups) | set(groups))))
    exempt = (lambda n: ".cross_attn." in n) if strategy == "encoder_plus_cross_attention" else None
    frozen = frozen_parameter_names(params, config.frozen_groups, exempt)
    return train(items, model_config, config, params=params, frozen=frozen, on_step=on_step)


def evaluation_loss(params: ModelParams, items: Sequence, model_config: ModelConfig,
                    alpha: float = 1.0, beta: float = 1.0, batch_size: int = 16) -> float:
    """Teacher-forced total loss averaged over ``items`` (utterance-weighted)."""
    model = ProsodyTTS(model_config, params)
    tuples = [it.as_tuple() if hasattr(it, "as_tuple") else it for it in items]
    if not tuples:
        raise InputError("no evaluation items")
    total = 0.0
    with tc.no_grad():
        for i in range(0, len(tuples), batch_size):
            chunk = tuples[i:i + batch_size]
            breakdown, _, _ = model.forward_train(make_batch(chunk), alpha, beta)
            total += breakdown.total * len(chunk)
    return total / len(tuples)


def write_loss_curve(path: str | Path, curve: Sequence[CurvePoint], append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists()
    with path.open("a" if append else "w", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(CURVE_FIELDS)
        for point in curve:
            writer.writerow([point.step] + [repr(float(v)) for v in point.row()[1:]])


def read_loss_curve(path: str | Path) -> list[dict[str, float]]:
    with Path(path).open() as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return np.zeros(0)
    c = np.cumsum(np.concatenate([[0.0], values]))
    return (c[window:] - c[:-window]) / window


__all__ = ["train", "refine", "noam_rate", "evaluation_loss", "write_loss_curve", "read_loss_curve",
           "strategy_freezing", "frozen_parameter_names", "moving_average", "AdamState", "TrainResult",
           "CurvePoint", "STRATEGIES", "PARAM_GROUPS"]
