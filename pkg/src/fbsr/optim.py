"""Stage 1 filter training: analytic gradients of the reconstruction MSE,
AdamW with decoupled weight decay, and a one-cycle learning-rate schedule.

The optimiser and schedule are plain functions over dicts of arrays so the
Stage 2 regressor reuses them unchanged.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .filterbank import FilterBank, cosine_modulated_init
from .signal import Kernel, convolve1d, correlate_taps, upsample_zero

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- AdamW

@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float) -> dict:
    """One AdamW update. Returns new parameter arrays; ``state`` is advanced in place.

    Only keys present in ``grads`` are updated, so frozen parameters never get
    moment buffers.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g)
        if g.shape != p.shape:
            raise InvalidArgument(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        decayed = p * (1.0 - lr * state.weight_decay)
        out[name] = decayed - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out


# ---------------------------------------------------------------- one-cycle

@dataclass(frozen=True)
class OneCycleSchedule:
    max_lr: float
    total_steps: int
    warmup_fraction: float = 0.3
    initial_divisor: float = 25.0
    final_divisor: float = 1e4

    def __post_init__(self):
        if self.max_lr <= 0 or self.total_steps < 1:
            raise InvalidArgument("one-cycle schedule needs max_lr > 0 and total_steps >= 1")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise InvalidArgument("warmup_fraction must lie in [0, 1]")


def _cos_anneal(start, end, frac):
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def one_cycle_lr(schedule: OneCycleSchedule, step: int) -> float:
    """Cosine rise from max_lr/initial_divisor to max_lr, then cosine decay to
    max_lr/final_divisor at the last step."""
    if not 0 <= step < schedule.total_steps:
        raise InvalidArgument(f"step {step} outside [0, {schedule.total_steps})")
    initial = schedule.max_lr / schedule.initial_divisor
    final = schedule.max_lr / schedule.final_divisor
    peak = schedule.warmup_fraction * schedule.total_steps
    if step <= peak and peak > 0:
        return _cos_anneal(initial, schedule.max_lr, step / peak)
    last = schedule.total_steps - 1
    if last <= peak:
        return schedule.max_lr
    return _cos_anneal(schedule.max_lr, final, (step - peak) / (last - peak))


# ---------------------------------------------------------------- gradients

def bank_params(bank: FilterBank) -> dict:
    """Trainable taps keyed ``h1..h{M-1}`` and ``f0..f{M-1}``."""
    params = {f"h{k}": bank.analysis[k].taps.copy() for k in range(1, bank.M)}
    params.update({f"f{k}": bank.synthesis[k].taps.copy() for k in range(bank.M)})
    if not bank.h0_frozen:
        params["h0"] = bank.analysis[0].taps.copy()
    return params


def bank_from_params(bank: FilterBank, params: dict) -> FilterBank:
    ana = [params.get(f"h{k}", bank.analysis[k].taps) for k in range(bank.M)]
    syn = [params[f"f{k}"] for k in range(bank.M)]
    return bank.with_taps(ana, syn)


def loss_and_grad(bank: FilterBank, batch) -> tuple:
    """Batch-mean MSE of the reconstruction and its gradient w.r.t. trainable taps.

    Gradients flow through the adjoint of each stage: the transpose of a
    convolution is convolution with the reversed kernel, the transpose of
    decimation is zero insertion and vice versa.
    """
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    M, L = bank.M, bank.length
    n = x.shape[-1]
    if n % M:
        raise InvalidArgument(f"line length {n} is not divisible by M={M}")

    upsampled = []
    xhat = np.zeros_like(x)
    for h, f in zip(bank.analysis, bank.synthesis):
        u = upsample_zero(convolve1d(x, h)[..., ::M], M)
        upsampled.append(u)
        xhat += convolve1d(u, f)
    resid = xhat - x
    loss = float(np.mean(resid ** 2))
    g = 2.0 * resid / resid.size

    grads = {}
    for k, (h, f) in enumerate(zip(bank.analysis, bank.synthesis)):
        grads[f"f{k}"] = correlate_taps(g, upsampled[k], L, f.center)
        if k == 0 and bank.h0_frozen:
            continue
        g_u = convolve1d(g, f.reversed())
        g_a = np.zeros_like(g_u)
        g_a[..., ::M] = g_u[..., ::M]
        grads[f"h{k}"] = correlate_taps(g_a, x, L, h.center)
    return loss, grads


def grad_filters(bank: FilterBank, batch) -> dict:
    return loss_and_grad(bank, batch)[1]


# ---------------------------------------------------------------- training

@dataclass
class Stage1Config:
    steps: int = 100_000
    batch_size: int = 32
    max_lr: float = 0.1
    seed: int = 0
    filter_length: int | None = None  # default max(4*M, len(h0))
    weight_decay: float = 1e-2

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.max_lr <= 0:
            raise InvalidArgument("steps, batch_size and max_lr must be positive")
        if self.filter_length is not None and self.filter_length < 1:
            raise InvalidArgument("filter_length must be positive")


@dataclass
class LossTrace:
    steps: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    def append(self, step, lr, loss):
        self.steps.append(step)
        self.lrs.append(lr)
        self.losses.append(loss)

    def smoothed(self, window: int = 100) -> np.ndarray:
        a = np.asarray(self.losses)
        w = max(1, min(window, a.size))
        return np.convolve(a, np.ones(w) / w, mode="valid")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "lr", "loss"])
            for s, lr, loss in zip(self.steps, self.lrs, self.losses):
                w.writerow([s, repr(lr), repr(loss)])


def default_filter_length(h0: Kernel, M: int) -> int:
    return max(4 * M, len(h0))


def prepare_lines(lines, M: int, min_length: int) -> list:
    out = []
    for line in lines:
        a = np.asarray(line, dtype=np.float64).reshape(-1)
        if a.size < min_length:
            raise InvalidArgument(f"line of length {a.size} shorter than required {min_length}")
        out.append(a)
    return out


def _sample_batch(lines, rng, batch_size, M, crop):
    idx = rng.integers(0, len(lines), size=batch_size)
    batch = np.empty((batch_size, crop))
    for i, j in enumerate(idx):
        line = lines[j]
        start = rng.integers(0, line.size - crop + 1)
        batch[i] = line[start:start + crop]
    return batch


class NumericalFailure(RuntimeError):
    pass


def train_stage1(lines, h0: Kernel, M: int, cfg: Stage1Config, progress=None):
    """Complete a filter bank around the fixed prototype ``h0``.

    Returns ``(bank, trace)``. Lines are sampled uniformly with replacement and
    randomly cropped to the largest common length that is a multiple of M.
    """
    lines = list(lines)
    if not lines:
        raise InvalidArgument("stage 1 needs a nonempty line dataset")
    L = cfg.filter_length or default_filter_length(h0, M)
    if L < len(h0):
        raise InvalidArgument(f"filter_length {L} shorter than prototype ({len(h0)} taps)")
    lines = prepare_lines(lines, M, 1)
    crop = min(a.size for a in lines)
    crop -= crop % M
    if crop < 2 * L:
        raise InvalidArgument(f"lines must be at least 2*L={2 * L} samples after cropping to a multiple of M")

    bank = cosine_modulated_init(h0.padded(L), M)
    h0_taps = bank.analysis[0].taps.copy()
    params = bank_params(bank)
    state = AdamWState(weight_decay=cfg.weight_decay)
    sched = OneCycleSchedule(cfg.max_lr, cfg.steps)
    rng = np.random.default_rng(cfg.seed)
    trace = LossTrace()

    for step in range(cfg.steps):
        batch = _sample_batch(lines, rng, cfg.batch_size, M, crop)
        loss, grads = loss_and_grad(bank_from_params(bank, params), batch)
        if not math.isfinite(loss):
            raise NumericalFailure(f"stage 1 loss became {loss} at step {step}")
        lr = one_cycle_lr(sched, step)
        params = adamw_step(params, grads, state, lr)
        trace.append(step, lr, loss)
        if progress and (step % progress == 0 or step == cfg.steps - 1):
            log.info("stage1 step %d lr %.3g loss %.4g", step, lr, loss)

    trained = bank_from_params(bank, params)
    assert np.array_equal(trained.analysis[0].taps, h0_taps)
    return trained, trace
