"""Losses, optimiser, the streaming training loop, and checkpointing.

Supervision is soft Dice on labelled batches; the semi-supervised signal
is a symmetric stop-gradient MSE between the two decoder heads on
unlabelled batches, ramped in by a linear warm-up. End-of-epoch parameter
snapshots are kept and their elementwise mean is the evaluation model.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (Tape, Tensor, add, as_tensor, backward, mse, record_op,
                       scale, stop_gradient)
from .errors import (ConfigError, ContractError, DimensionError, FormatError,
                     NumericalAbort)
from .nets import (ModelParams, clone_params, decoder_param_names,
                   init_params, model_forward, named_params)

CONSISTENCY_MODES = ("symmetric", "first_to_second", "second_to_first")
ALPHA_SCHEDULES = ("warmup", "constant")

CHECKPOINT_MAGIC = b"MMCKPT01"
HISTORY_COLUMNS = ("step", "epoch", "dice1", "dice2", "consistency", "alpha",
                   "total")


@dataclass
class TrainConfig:
    alpha_max: float = 0.002
    warmup_fraction: float = 0.2
    alpha_schedule: str = "warmup"
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 1
    seed: int = 0
    channels: int = 8
    in_channels: int = 1
    save_last_k: int = 10
    dice_smooth: float = 1.0
    consistency_mode: str = "symmetric"

    def validate(self) -> "TrainConfig":
        if self.alpha_max < 0:
            raise ConfigError("alpha_max must be >= 0")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("warmup_fraction must be in [0, 1]")
        if self.alpha_schedule not in ALPHA_SCHEDULES:
            raise ConfigError(f"alpha_schedule must be one of {ALPHA_SCHEDULES}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.save_last_k < 1:
            raise ConfigError("epochs, batch_size and save_last_k must be >= 1")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if self.dice_smooth <= 0:
            raise ConfigError("dice_smooth must be positive")
        if self.consistency_mode not in CONSISTENCY_MODES:
            raise ConfigError(f"consistency_mode must be one of "
                              f"{CONSISTENCY_MODES}")
        return self


def reference_config() -> TrainConfig:
    """Full-scale reference settings: width 24, lr 2e-5, 50 epochs, batch 1,
    alpha 0.002 and last-10 snapshot averaging."""
    return TrainConfig(alpha_max=0.002, lr=2e-5, epochs=50, batch_size=1,
                       channels=24, save_last_k=10)


# ---------------------------------------------------------------------------
# losses

def dice_loss(probs: Tensor, target, smooth: float = 1.0) -> Tensor:
    """Soft Dice loss: 1 - (2*sum(p*g) + smooth) / (sum(p) + sum(g) + smooth).

    Acts on raw probabilities, never on thresholded masks. Perfect overlap
    on a hard target gives exactly 0 because the smooth terms cancel.
    """
    if smooth <= 0:
        raise ConfigError("dice smooth term must be positive")
    target = as_tensor(target)
    if probs.shape != target.shape:
        raise DimensionError(f"dice_loss: prediction {probs.shape} vs target "
                             f"{target.shape}")
    p, g = probs.data, target.data
    a = 2.0 * np.sum(p * g) + smooth
    b = np.sum(p) + np.sum(g) + smooth
    out = np.asarray(1.0 - a / b, dtype=p.dtype)

    def bw(go):
        # d/dp_i [1 - a/b] = (a - 2*g_i*b) / b^2
        return (go * (a - 2.0 * g * b) / (b * b), None)

    return record_op("dice_loss", (probs, target), out, bw)


def consistency_loss(p1: Tensor, p2: Tensor,
                     mode: str = "symmetric") -> Tensor:
    """Stop-gradient MSE between the two heads.

    Symmetric form: 0.5*mse(p1, sg(p2)) + 0.5*mse(p2, sg(p1)). Each head
    chases a frozen copy of the other, so the term never pushes a head
    through its own target. One-sided modes keep a single summand and
    train only the named direction.
    """
    if mode == "symmetric":
        return add(scale(mse(p1, stop_gradient(p2)), 0.5),
                   scale(mse(p2, stop_gradient(p1)), 0.5))
    if mode == "first_to_second":
        return mse(p1, stop_gradient(p2))
    if mode == "second_to_first":
        return mse(p2, stop_gradient(p1))
    raise ConfigError(f"unknown consistency mode {mode!r}")


def alpha_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Consistency weight at a step: linear 0 -> alpha_max over the warm-up
    span, constant afterwards (or constant throughout)."""
    if cfg.alpha_schedule == "constant":
        return cfg.alpha_max
    warm = cfg.warmup_fraction * total_steps
    if warm <= 0:
        return cfg.alpha_max
    return cfg.alpha_max * min(1.0, step / warm)


# ---------------------------------------------------------------------------
# optimiser

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, named: list[tuple[str, Tensor]], **kw) -> "AdamState":
        state = cls(**kw)
        for name, t in named:
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        return state


def adam_step(named: list[tuple[str, Tensor]], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, tensor in named:
        g = grads.get(name)
        if g is None:
            raise ContractError(f"adam_step: no gradient supplied for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        tensor.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def zero_grads(named: list[tuple[str, Tensor]]) -> None:
    for _, t in named:
        if t.grad is not None:
            t.grad[...] = 0


# ---------------------------------------------------------------------------
# snapshot averaging

def average_checkpoints(snapshots: list[ModelParams]) -> ModelParams:
    """Elementwise mean of parameter snapshots (the last-k epoch average)."""
    if not snapshots:
        raise ContractError("average_checkpoints needs at least one snapshot")
    out = clone_params(snapshots[0])
    per_snap = [dict(named_params(s)) for s in snapshots]
    for name, tensor in named_params(out):
        stack = []
        for d in per_snap:
            arr = d[name].data
            if arr.shape != tensor.data.shape:
                raise DimensionError(f"snapshot shape mismatch for {name}")
            stack.append(arr)
        tensor.data = np.mean(np.stack(stack), axis=0)
    return out


# ---------------------------------------------------------------------------
# training loop

@dataclass
class HistoryRow:
    step: int
    epoch: int
    dice1: float
    dice2: float
    consistency: float
    alpha: float
    total: float


def train(config: TrainConfig, model: ModelParams, labelled_stream,
          unlabelled_stream=None, stop_gradient_audit: bool = False):
    """Streaming training.

    Every step draws one labelled batch (Dice per head) and, when an
    unlabelled stream is given, one unlabelled batch (consistency between
    heads, weighted by the warm-up schedule). Epoch length follows the
    unlabelled stream when present, the labelled stream otherwise; the
    labelled stream cycles independently of epoch boundaries. Returns
    (final params, averaged params over the last save_last_k epoch-end
    snapshots, history rows).

    With stop_gradient_audit=True each step additionally differentiates
    each consistency summand alone and verifies the detached head's own
    parameters receive exactly zero gradient.
    """
    config.validate()
    if labelled_stream is None or labelled_stream.epoch_len == 0:
        raise ConfigError("training needs a non-empty labelled stream")
    if unlabelled_stream is not None and unlabelled_stream.epoch_len == 0:
        raise ConfigError("unlabelled stream is empty; pass None to train "
                          "supervised-only")
    if unlabelled_stream is not None and len(model.decoders) != 2:
        raise ContractError("consistency training needs a two-decoder model")

    steps_per_epoch = (unlabelled_stream.epoch_len if unlabelled_stream
                       else labelled_stream.epoch_len)
    total_steps = steps_per_epoch * config.epochs
    named = named_params(model)
    state = AdamState.for_params(named)
    snapshots: deque[ModelParams] = deque(maxlen=config.save_last_k)
    history: list[HistoryRow] = []

    step = 0
    for epoch in range(config.epochs):
        for _ in range(steps_per_epoch):
            a = alpha_at(step, total_steps, config)
            xb, yb = labelled_stream.next_batch()
            xu = None
            if unlabelled_stream is not None:
                xu, _ = unlabelled_stream.next_batch()

            if stop_gradient_audit and xu is not None:
                _audit_stop_gradient(model, named, xu, step)

            with Tape():
                probs = model_forward(model, Tensor(xb))
                target = Tensor(yb)
                d1 = dice_loss(probs[0], target, config.dice_smooth)
                total = d1
                d2_val = 0.0
                if len(probs) == 2:
                    d2 = dice_loss(probs[1], target, config.dice_smooth)
                    d2_val = d2.item()
                    total = add(d1, d2)
                cons_val = 0.0
                if xu is not None:
                    up = model_forward(model, Tensor(xu))
                    cons = consistency_loss(up[0], up[1],
                                            config.consistency_mode)
                    cons_val = cons.item()
                    if a > 0.0:
                        total = add(total, scale(cons, a))

            total_val = total.item()
            if not np.isfinite(total_val):
                raise NumericalAbort(f"non-finite loss {total_val} at step "
                                     f"{step}", step=step)
            backward(total)
            grads = {name: t.grad for name, t in named}
            adam_step(named, grads, state, config.lr)
            zero_grads(named)
            history.append(HistoryRow(step, epoch, d1.item(), d2_val,
                                      cons_val, a, total_val))
            step += 1
        snapshots.append(clone_params(model))

    averaged = average_checkpoints(list(snapshots))
    return model, averaged, history


def _audit_stop_gradient(model, named, xu, step):
    """Check both one-sided consistency terms leave the detached head's own
    parameters at exactly zero gradient."""
    for mode, frozen_dec in (("first_to_second", 1), ("second_to_first", 0)):
        with Tape():
            up = model_forward(model, Tensor(xu))
            term = consistency_loss(up[0], up[1], mode)
        backward(term)
        frozen = set(decoder_param_names(model, frozen_dec))
        for name, t in named:
            if name in frozen and np.any(t.grad != 0):
                raise ContractError(
                    f"stop-gradient audit failed at step {step}: {name} got "
                    f"gradient from the {mode} consistency term")
        zero_grads(named)


# ---------------------------------------------------------------------------
# checkpoint container

def save_checkpoint(path, model: ModelParams,
                    config_echo: dict[str, str] | None = None) -> None:
    """Binary container: magic, config echo, then per-array records.

    Layout (all integers little-endian u32):
      magic "MMCKPT01" | echo_len | echo utf-8 ("key=value" lines)
      | n_arrays | repeated (name_len | name utf-8 | rank | dims... |
      float32 little-endian payload)
    """
    echo = "".join(f"{k}={v}\n" for k, v in (config_echo or {}).items())
    echo_b = echo.encode("utf-8")
    named = named_params(model)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(echo_b)))
        f.write(echo_b)
        f.write(struct.pack("<I", len(named)))
        for name, t in named:
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", t.data.ndim))
            f.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint container; returns (arrays, config echo dict)."""
    with open(path, "rb") as f:
        buf = f.read()

    def need(n, offset, what):
        if offset + n > len(buf):
            raise FormatError(f"checkpoint truncated reading {what}", offset)
        return offset + n

    pos = need(8, 0, "magic")
    if buf[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:8]!r}", 0)
    pos2 = need(4, pos, "echo length")
    (echo_len,) = struct.unpack_from("<I", buf, pos)
    pos = need(echo_len, pos2, "config echo")
    echo_text = buf[pos2:pos].decode("utf-8")
    echo = {}
    for line in echo_text.splitlines():
        if line:
            k, _, v = line.partition("=")
            echo[k] = v
    pos2 = need(4, pos, "array count")
    (n_arrays,) = struct.unpack_from("<I", buf, pos)
    pos = pos2
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        pos2 = need(4, pos, "name length")
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos = need(name_len, pos2, "array name")
        name = buf[pos2:pos].decode("utf-8")
        pos2 = need(4, pos, "rank")
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos = need(4 * rank, pos2, "dims")
        dims = struct.unpack_from(f"<{rank}I", buf, pos2)
        numel = int(np.prod(dims)) if rank else 1
        pos2 = need(4 * numel, pos, "payload")
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=numel,
                                     offset=pos).reshape(dims).copy()
        pos = pos2
    if pos != len(buf):
        raise FormatError("trailing bytes after last array", pos)
    return arrays, echo


def load_model(path, dtype=np.float32) -> tuple[ModelParams, dict[str, str]]:
    """Rebuild a model from a checkpoint; the echo must carry the variant,
    channel width and input channel count under model.* keys."""
    arrays, echo = load_checkpoint(path)
    try:
        variant = echo["model.variant"]
        channels = int(echo["model.channels"])
        in_channels = int(echo["model.in_channels"])
        seed = int(echo.get("train.seed", "0"))
    except KeyError as k:
        raise FormatError(f"checkpoint echo is missing {k}") from None
    model = init_params(variant, channels, in_channels, seed=seed, dtype=dtype)
    named = dict(named_params(model))
    if set(named) != set(arrays):
        raise FormatError("checkpoint arrays do not match the model layout")
    for name, t in named.items():
        if arrays[name].shape != t.data.shape:
            raise FormatError(f"checkpoint shape mismatch for {name}")
        t.data = arrays[name].astype(dtype)
    return model, echo


# ---------------------------------------------------------------------------
# history file

def write_history_csv(path, rows: list[HistoryRow],
                      header_comments: tuple[str, ...] = ()) -> None:
    with open(path, "w", newline="") as f:
        for line in header_comments:
            f.write(f"# {line}\n")
        f.write(",".join(HISTORY_COLUMNS) + "\n")
        for r in rows:
            f.write(f"{r.step},{r.epoch},{r.dice1:.10g},{r.dice2:.10g},"
                    f"{r.consistency:.10g},{r.alpha:.10g},{r.total:.10g}\n")


def read_history_csv(path) -> list[HistoryRow]:
    rows = []
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f if not ln.startswith("#")]
    if not lines or lines[0] != ",".join(HISTORY_COLUMNS):
        raise FormatError(f"bad history header in {path}")
    for ln in lines[1:]:
        if not ln:
            continue
        s, e, d1, d2, c, a, t = ln.split(",")
        rows.append(HistoryRow(int(s), int(e), float(d1), float(d2), float(c),
                               float(a), float(t)))
    return rows
