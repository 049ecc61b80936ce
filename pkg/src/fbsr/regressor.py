"""Stage 2: a residual CNN that maps a coarse patch to its M-1 detail patches.

Forward and backward passes are written out by hand in numpy (3x3 convs,
stride 1, zero padding 1, leaky ReLU 0.2, identity skips, no normalisation).
The same network class serves as the optional patch discriminator, whose
input is the coarse patch stacked with the detail channels.

Parameter order (also the RGR1 blob order), per network::

    in.w, in.b, blk0.w1, blk0.b1, blk0.w2, blk0.b2, ..., out.w, out.b
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument
from .optim import AdamWState, LossTrace, NumericalFailure, OneCycleSchedule, adamw_step, one_cycle_lr

log = logging.getLogger(__name__)

SLOPE = 0.2
MODEL_MAGIC = b"RGR1"


# ---------------------------------------------------------------- layers

def _im2col(x):
    """(B, H, W, C) -> (B*H*W, 9*C) patches of the zero-padded input."""
    B, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((B, H, W, 9, C), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, 3 * i + j, :] = xp[:, i:i + H, j:j + W, :]
    return cols.reshape(B * H * W, 9 * C)


def _weight_matrix(w):
    # (O, C, 3, 3) -> (9*C, O), rows ordered like _im2col columns
    O, C = w.shape[:2]
    return w.transpose(2, 3, 1, 0).reshape(9 * C, O)


def conv3x3(x, w, b=None):
    """Channels-last 3x3 conv: (B, H, W, C) with weights (O, C, 3, 3) -> (B, H, W, O).

    Returns the output and the im2col matrix needed by the backward pass.
    """
    B, H, W, _ = x.shape
    cols = _im2col(x)
    out = cols @ _weight_matrix(w)
    if b is not None:
        out += b
    return out.reshape(B, H, W, -1), cols


def conv3x3_backward(dout, cols, w):
    B, H, W, O = dout.shape
    C = w.shape[1]
    d2 = dout.reshape(-1, O)
    dw = (cols.T @ d2).reshape(3, 3, C, O).transpose(3, 2, 0, 1)
    db = d2.sum(axis=0)
    dcols = (d2 @ _weight_matrix(w).T).reshape(B, H, W, 3, 3, C)
    dxp = np.zeros((B, H + 2, W + 2, C), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + H, j:j + W, :] += dcols[:, :, :, i, j, :]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def lrelu(z):
    return np.where(z > 0, z, SLOPE * z)


def lrelu_grad(z, dout):
    return np.where(z > 0, dout, SLOPE * dout)


# ---------------------------------------------------------------- network

def param_names(blocks: int) -> list:
    names = ["in.w", "in.b"]
    for i in range(blocks):
        names += [f"blk{i}.w1", f"blk{i}.b1", f"blk{i}.w2", f"blk{i}.b2"]
    return names + ["out.w", "out.b"]


def init_params(in_ch, width, out_ch, blocks, rng, dtype=np.float64, zero_out=True) -> dict:
    """He-uniform init scaled for leaky ReLU; the output conv starts at zero."""
    gain = math.sqrt(2.0 / (1.0 + SLOPE ** 2))

    def conv(o, c, scale=1.0):
        bound = scale * gain * math.sqrt(3.0 / (9 * c))
        return rng.uniform(-bound, bound, size=(o, c, 3, 3)).astype(dtype)

    p = {"in.w": conv(width, in_ch), "in.b": np.zeros(width, dtype)}
    for i in range(blocks):
        p[f"blk{i}.w1"] = conv(width, width)
        p[f"blk{i}.b1"] = np.zeros(width, dtype)
        # damp the residual branch so deep stacks start near identity
        p[f"blk{i}.w2"] = conv(width, width, 0.1)
        p[f"blk{i}.b2"] = np.zeros(width, dtype)
    if zero_out:
        p["out.w"] = np.zeros((out_ch, width, 3, 3), dtype)
    else:
        p["out.w"] = conv(out_ch, width)
    p["out.b"] = np.zeros(out_ch, dtype)
    return p


def net_forward(params, x, blocks):
    """(B, C, H, W) -> (B, O, H, W). Activations are kept channels-last inside."""
    cache = {}
    x = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    z, cache["in"] = conv3x3(x, params["in.w"], params["in.b"])
    cache["in.z"] = z
    a = lrelu(z)
    for i in range(blocks):
        z1, cache[f"blk{i}.c1"] = conv3x3(a, params[f"blk{i}.w1"], params[f"blk{i}.b1"])
        cache[f"blk{i}.z1"] = z1
        z2, cache[f"blk{i}.c2"] = conv3x3(lrelu(z1), params[f"blk{i}.w2"], params[f"blk{i}.b2"])
        a = a + z2
    out, cache["out"] = conv3x3(a, params["out.w"], params["out.b"])
    return out.transpose(0, 3, 1, 2), cache


def net_backward(params, cache, dout, blocks):
    """Parameter gradients and the gradient with respect to the network input."""
    grads = {}
    dout = np.ascontiguousarray(dout.transpose(0, 2, 3, 1))
    da, grads["out.w"], grads["out.b"] = conv3x3_backward(dout, cache["out"], params["out.w"])
    for i in reversed(range(blocks)):
        dr, grads[f"blk{i}.w2"], grads[f"blk{i}.b2"] = conv3x3_backward(
            da, cache[f"blk{i}.c2"], params[f"blk{i}.w2"])
        dz1 = lrelu_grad(cache[f"blk{i}.z1"], dr)
        dskip, grads[f"blk{i}.w1"], grads[f"blk{i}.b1"] = conv3x3_backward(
            dz1, cache[f"blk{i}.c1"], params[f"blk{i}.w1"])
        da = da + dskip
    dz = lrelu_grad(cache["in.z"], da)
    dx, grads["in.w"], grads["in.b"] = conv3x3_backward(dz, cache["in"], params["in.w"])
    return grads, dx.transpose(0, 3, 1, 2)


# ---------------------------------------------------------------- loss

def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def stage2_loss(pred, target, disc_logits=None, l1_weight=100.0, adversarial_weight=1.0):
    """Pix2Pix generator objective on the detail channels.

    ``l1_weight * mean|pred - target|`` plus, when ``disc_logits`` is given,
    ``adversarial_weight * BCE(disc_logits, real)``. Returns
    ``(loss, d_pred, d_logits)``; ``d_logits`` is None without a discriminator.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise InvalidArgument(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    loss = l1_weight * float(np.mean(np.abs(diff)))
    d_pred = l1_weight * np.sign(diff) / diff.size
    d_logits = None
    if disc_logits is not None:
        loss += adversarial_weight * float(np.mean(_softplus(-disc_logits)))
        d_logits = -adversarial_weight * _sigmoid(-disc_logits) / disc_logits.size
    return loss, d_pred, d_logits


def discriminator_loss(real_logits, fake_logits):
    """Half the sum of BCE(real, 1) and BCE(fake, 0); returns loss and logit grads."""
    loss = 0.5 * (float(np.mean(_softplus(-real_logits))) + float(np.mean(_softplus(fake_logits))))
    d_real = -0.5 * _sigmoid(-real_logits) / real_logits.size
    d_fake = 0.5 * _sigmoid(fake_logits) / fake_logits.size
    return loss, d_real, d_fake


# ---------------------------------------------------------------- model

@dataclass
class RegressorConfig:
    residual_blocks: int = 4
    base_features: int = 8
    patch_size: int = 32
    adversarial: bool = False
    adversarial_weight: float = 1.0
    l1_weight: float = 100.0
    steps: int = 10_000
    batch_size: int = 32
    max_lr: float = 1e-3
    weight_decay: float = 1e-2
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.patch_size < 8:
            raise InvalidArgument(f"patch_size must be >= 8, got {self.patch_size}")
        if self.residual_blocks < 1 or self.base_features < 1:
            raise InvalidArgument("residual_blocks and base_features must be >= 1")
        if self.steps < 1 or self.batch_size < 1 or self.max_lr <= 0:
            raise InvalidArgument("steps, batch_size and max_lr must be positive")
        if self.dtype not in ("float32", "float64"):
            raise InvalidArgument(f"dtype must be float32 or float64, got {self.dtype!r}")


class ConvRegressor:
    """Generator G (and optional discriminator D) for one value of M."""

    DISC_BLOCKS = 2
    PREDICT_CHUNK = 32

    def __init__(self, M: int, p: int, blocks: int, features: int, adversarial: bool = False,
                 seed: int = 0, dtype=np.float64, params=None, disc_params=None):
        if M < 2:
            raise InvalidArgument(f"regressor needs M >= 2, got {M}")
        self.M, self.p, self.blocks, self.features = M, p, blocks, features
        self.adversarial = adversarial
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params = params if params is not None else init_params(
            1, self.width, M - 1, blocks, rng, self.dtype)
        self.disc_params = None
        if adversarial:
            self.disc_params = disc_params if disc_params is not None else init_params(
                M, self.disc_width, 1, self.DISC_BLOCKS, rng, self.dtype, zero_out=False)

    @classmethod
    def from_config(cls, M: int, cfg: RegressorConfig) -> "ConvRegressor":
        return cls(M, cfg.patch_size, cfg.residual_blocks, cfg.base_features,
                   cfg.adversarial, cfg.seed, np.dtype(cfg.dtype))

    @property
    def width(self) -> int:
        return self.features * self.M

    @property
    def disc_width(self) -> int:
        return max(1, self.features // 2) * self.M

    def forward(self, y) -> np.ndarray:
        """Single p×p coarse patch -> (M-1, p, p) details."""
        y = np.asarray(y)
        if y.ndim != 2:
            raise InvalidArgument(f"expected a 2D patch, got shape {y.shape}")
        return self.predict(y[None, None])[0]

    def predict(self, batch) -> np.ndarray:
        batch = np.asarray(batch)
        if batch.ndim != 4 or batch.shape[1] != 1:
            raise InvalidArgument(f"expected (B, 1, H, W) input, got shape {batch.shape}")
        out = np.empty((batch.shape[0], self.M - 1) + batch.shape[2:])
        # bounded chunks keep the im2col buffers small for whole-volume inference
        for i in range(0, batch.shape[0], self.PREDICT_CHUNK):
            part = batch[i:i + self.PREDICT_CHUNK].astype(self.dtype)
            out[i:i + self.PREDICT_CHUNK] = net_forward(self.params, part, self.blocks)[0]
        return out

    def discriminate(self, coarse, details):
        x = np.concatenate([coarse, details], axis=1).astype(self.dtype)
        return net_forward(self.disc_params, x, self.DISC_BLOCKS)

    def generator_loss_and_grad(self, y, target, cfg: RegressorConfig):
        """Loss and parameter gradients of the generator objective on a batch.

        ``y`` is (B, 1, p, p); ``target`` is (B, M-1, p, p).
        """
        y = y.astype(self.dtype)
        pred, cache = net_forward(self.params, y, self.blocks)
        logits = None
        if self.adversarial and cfg.adversarial:
            logits, dcache = self.discriminate(y, pred)
        loss, d_pred, d_logits = stage2_loss(pred, target, logits, cfg.l1_weight, cfg.adversarial_weight)
        if d_logits is not None:
            _, d_in = net_backward(self.disc_params, dcache, d_logits, self.DISC_BLOCKS)
            d_pred = d_pred + d_in[:, 1:]
        grads, _ = net_backward(self.params, cache, d_pred.astype(self.dtype), self.blocks)
        return loss, grads, pred

    def discriminator_loss_and_grad(self, y, target, pred):
        real, rcache = self.discriminate(y, target)
        fake, fcache = self.discriminate(y, pred)
        loss, d_real, d_fake = discriminator_loss(real, fake)
        g_real, _ = net_backward(self.disc_params, rcache, d_real, self.DISC_BLOCKS)
        g_fake, _ = net_backward(self.disc_params, fcache, d_fake, self.DISC_BLOCKS)
        return loss, {k: g_real[k] + g_fake[k] for k in g_real}


def train_stage2(pairs, M: int, cfg: RegressorConfig, progress: int = 0):
    """Fit G on (coarse, details) pairs with AdamW and a one-cycle schedule.

    ``pairs`` is a ``TrainPairs``-like object with ``inputs`` (N, p, p) and
    ``targets`` (N, M-1, p, p). Returns ``(model, trace)``.
    """
    inputs = np.asarray(pairs.inputs)
    targets = np.asarray(pairs.targets)
    if inputs.shape[0] == 0:
        raise InvalidArgument("stage 2 needs a nonempty dataset")
    if inputs.ndim != 3 or targets.ndim != 4 or targets.shape[0] != inputs.shape[0] \
            or targets.shape[1] != M - 1 or targets.shape[2:] != inputs.shape[1:]:
        raise InvalidArgument(
            f"inconsistent dataset shapes {inputs.shape} / {targets.shape} for M={M}")
    if inputs.shape[1] != cfg.patch_size or inputs.shape[2] != cfg.patch_size:
        raise InvalidArgument(f"pairs are {inputs.shape[1:]} but patch_size is {cfg.patch_size}")

    model = ConvRegressor.from_config(M, cfg)
    dtype = model.dtype
    inputs = inputs.astype(dtype)[:, None]
    targets = targets.astype(dtype)
    sched = OneCycleSchedule(cfg.max_lr, cfg.steps)
    g_state = AdamWState(weight_decay=cfg.weight_decay)
    d_state = AdamWState(weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    trace = LossTrace()

    for step in range(cfg.steps):
        idx = rng.integers(0, inputs.shape[0], size=cfg.batch_size)
        y, t = inputs[idx], targets[idx]
        loss, grads, pred = model.generator_loss_and_grad(y, t, cfg)
        if not math.isfinite(loss):
            raise NumericalFailure(f"stage 2 loss became {loss} at step {step}")
        lr = one_cycle_lr(sched, step)
        model.params = adamw_step(model.params, grads, g_state, lr)
        if model.adversarial and cfg.adversarial:
            _, d_grads = model.discriminator_loss_and_grad(y, t, pred)
            model.disc_params = adamw_step(model.disc_params, d_grads, d_state, lr)
        trace.append(step, lr, loss)
        if progress and (step % progress == 0 or step == cfg.steps - 1):
            log.info("stage2 step %d lr %.3g loss %.4g", step, lr, loss)
    return model, trace


# ---------------------------------------------------------------- serialization

def save_model(model: ConvRegressor, path) -> None:
    """RGR1: magic, u32 M, p, R, F, adversarial flag, then f64 G params
    (then D params when the flag is set) in ``param_names`` order."""
    header = MODEL_MAGIC + struct.pack("<5I", model.M, model.p, model.blocks, model.features,
                                       int(model.adversarial))
    blobs = [model.params[n].astype("<f8").tobytes() for n in param_names(model.blocks)]
    if model.adversarial:
        blobs += [model.disc_params[n].astype("<f8").tobytes()
                  for n in param_names(ConvRegressor.DISC_BLOCKS)]
    Path(path).write_bytes(header + b"".join(blobs))


def load_model(path, dtype=np.float64) -> ConvRegressor:
    buf = Path(path).read_bytes()
    if buf[:4] != MODEL_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MODEL_MAGIC!r}", 0)
    if len(buf) < 24:
        raise FormatError("truncated header", len(buf))
    M, p, R, F, adv = struct.unpack_from("<5I", buf, 4)
    if M < 2 or R < 1 or F < 1:
        raise FormatError(f"invalid header M={M} R={R} F={F}", 4)
    # shapes come from a freshly initialised model of the same architecture
    template = ConvRegressor(M, p, R, F, bool(adv), dtype=dtype)
    off = 24

    def read(names, source):
        nonlocal off
        out = {}
        for n in names:
            shape = source[n].shape
            count = int(np.prod(shape))
            if off + 8 * count > len(buf):
                raise FormatError(f"truncated parameter blob at {n}", off)
            out[n] = np.frombuffer(buf, "<f8", count, off).reshape(shape).astype(dtype)
            off += 8 * count
        return out

    params = read(param_names(R), template.params)
    disc = read(param_names(ConvRegressor.DISC_BLOCKS), template.disc_params) if adv else None
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", off)
    return ConvRegressor(M, p, R, F, bool(adv), dtype=dtype, params=params, disc_params=disc)
