"""Training: the mean negative-log-likelihood objective, Adam with a
validation-plateau learning-rate schedule, batching, gradient verification,
and the checkpoint container.

Everything is seeded and free of wall-clock state, so a run is bitwise
reproducible end to end: same checkpoints, same metric rows.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .errors import DivergenceError, FormatError

CHECKPOINT_MAGIC = "hcnaf-checkpoint v1"


@dataclass
class ConditionedSamples:
    """A dataset of (point, condition) pairs stored as two aligned arrays."""

    x: np.ndarray
    cond: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.cond = np.asarray(self.cond, dtype=np.float64)
        if self.cond.ndim == 1:
            self.cond = self.cond.reshape(-1, 1)
        if self.x.ndim != 2 or self.cond.ndim != 2 or self.x.shape[0] != self.cond.shape[0]:
            raise ValueError("x and cond must be aligned 2-D arrays")

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx):
        return ConditionedSamples(self.x[idx], self.cond[idx])

    @classmethod
    def concatenate(cls, parts):
        return cls(
            np.concatenate([p.x for p in parts], axis=0),
            np.concatenate([p.cond for p in parts], axis=0),
        )


@dataclass
class TrainConfig:
    learning_rate: float = 5e-3
    decay_factor: float = 0.5
    patience_iters: int = 2000
    batch_size: int = 64
    max_iters: int = 10000
    seed: int = 0
    precision: int = 64
    val_fraction: float = 0.1
    val_interval: int = 200
    improvement_tol: float = 1e-4
    clip_norm: float = 10.0
    divergence_limit: float = 1e6

    def __post_init__(self):
        if not (0 < self.decay_factor < 1):
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if not (0 < self.val_fraction < 1):
            raise ValueError("val_fraction must lie in (0, 1)")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


class AdamState:
    """First/second-moment accumulators for one parameter set, with a scratch
    buffer per parameter so the update allocates nothing."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self._scratch = {k: np.zeros_like(v) for k, v in params.items()}


def adam_step(state, params, grads, lr):
    """One bias-corrected Adam update, applied to params in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, g in grads.items():
        m, v, scratch = state.m[k], state.v[k], state._scratch[k]
        np.multiply(m, b1, out=m)
        np.multiply(g, 1 - b1, out=scratch)
        m += scratch
        np.multiply(v, b2, out=v)
        np.multiply(g, g, out=scratch)
        scratch *= 1 - b2
        v += scratch
        np.divide(v, c2, out=scratch)
        np.sqrt(scratch, out=scratch)
        scratch += state.eps
        np.divide(m, scratch, out=scratch)
        scratch *= lr / c1
        params[k] -= scratch
    return state


class PlateauSchedule:
    """Halve the learning rate when validation stops improving.

    The first observation sets the baseline; afterwards any observation that
    beats the best seen value by more than the tolerance resets the counter,
    and once patience_iters iterations elapse with no improvement the rate is
    multiplied by the decay factor (counter reset, best retained). The rate
    never increases, so it is always initial * factor**k.
    """

    def __init__(self, initial_lr, factor=0.5, patience_iters=2000, tol=1e-4):
        self.lr = float(initial_lr)
        self.factor = factor
        self.patience_iters = patience_iters
        self.tol = tol
        self.best = None
        self.last_improve = 0

    def update(self, iteration, val_loss):
        if self.best is None:
            self.best = float(val_loss)
        elif val_loss < self.best - self.tol:
            self.best = float(val_loss)
            self.last_improve = iteration
        elif iteration - self.last_improve >= self.patience_iters:
            self.lr *= self.factor
            self.last_improve = iteration
        return self.lr


def lr_schedule(cfg: TrainConfig, val_loss_history):
    """Replay a per-iteration validation history through a fresh schedule and
    return the resulting learning rate."""
    sched = PlateauSchedule(cfg.learning_rate, cfg.decay_factor, cfg.patience_iters, cfg.improvement_tol)
    for it, v in enumerate(val_loss_history, start=1):
        sched.update(it, v)
    return sched.lr


def nll_loss(net, batch: ConditionedSamples):
    """Mean negative log-density of a batch under the model's live parameters."""
    return float(net.nll(net.parameters(), batch.x, batch.cond))


def loss_and_grads(net, x, cond):
    """Negative-log-likelihood value and its gradient for every parameter,
    with the graph rebuilt on a fresh tape."""
    tape = tc.Tape(dtype=net.dtype)
    leaves = {k: tape.var(v, checked=False) for k, v in net.parameters().items()}
    loss = net.nll(leaves, x, cond)
    tape.backward(loss)
    grads = {k: (lv.grad if lv.grad is not None else np.zeros_like(lv.value)) for k, lv in leaves.items()}
    return float(loss.value), grads


def clip_global_norm(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        return {k: g * scale for k, g in grads.items()}, total
    return grads, total


def grad_check(net, batch: ConditionedSamples, fraction=0.05, step=1e-5, seed=0, floor=1e-6, max_probes=None):
    """Compare the analytic NLL gradient against central finite differences on
    a random subset of parameter entries; returns the maximum relative error.

    max_probes caps the subset size so the check stays affordable on large
    parameter sets."""
    params = net.parameters()
    _, analytic = loss_and_grads(net, batch.x, batch.cond)
    names = sorted(params)
    sizes = [params[k].size for k in names]
    total = sum(sizes)
    n_probe = max(1, int(round(fraction * total)))
    if max_probes is not None:
        n_probe = min(n_probe, max_probes)
    rng = np.random.default_rng(int(seed))
    flat_choices = rng.choice(total, size=min(n_probe, total), replace=False)
    starts = np.cumsum([0] + sizes)
    worst = 0.0
    for flat in sorted(flat_choices.tolist()):
        slot = int(np.searchsorted(starts, flat, side="right")) - 1
        name, offset = names[slot], flat - starts[slot]
        hi = {k: v.copy() for k, v in params.items()}
        lo = {k: v.copy() for k, v in params.items()}
        hi[name].reshape(-1)[offset] += step
        lo[name].reshape(-1)[offset] -= step
        fd = (float(net.nll(hi, batch.x, batch.cond)) - float(net.nll(lo, batch.x, batch.cond))) / (2 * step)
        an = float(analytic[name].reshape(-1)[offset])
        err = abs(an - fd) / max(abs(an), abs(fd), floor)
        worst = max(worst, err)
    return worst


@dataclass
class TrainResult:
    best_val: float
    best_iter: int
    history: list = field(default_factory=list)  # rows (iter, train_nll, val_nll, lr)
    diverged: bool = False


def _validation_nll(net, data: ConditionedSamples):
    return float(-np.mean(net.log_prob_batch(data.x, data.cond)))


def train(net, dataset: ConditionedSamples, cfg: TrainConfig):
    """Seeded minibatch training with periodic validation.

    Holds out a validation fraction, logs (iter, train NLL, val NLL, lr) at
    every validation point, halves the rate on plateaus, and leaves the model
    carrying the parameters of its best validation iterate. Raises
    DivergenceError if the loss passes the divergence limit.
    """
    n = len(dataset)
    if n < 2:
        raise ValueError("dataset too small to split")
    rng = np.random.default_rng(int(cfg.seed))
    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n)))
    val_set = dataset.subset(perm[:n_val])
    train_idx = perm[n_val:]

    params = net.parameters()
    adam = AdamState(params)
    sched = PlateauSchedule(cfg.learning_rate, cfg.decay_factor, cfg.patience_iters, cfg.improvement_tol)
    result = TrainResult(best_val=np.inf, best_iter=0)
    best_params = {k: v.copy() for k, v in params.items()}

    order = rng.permutation(train_idx)
    cursor = 0
    running = []
    for it in range(1, cfg.max_iters + 1):
        if cursor >= order.size:
            order = rng.permutation(train_idx)
            cursor = 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        loss, grads = loss_and_grads(net, dataset.x[idx], dataset.cond[idx])
        if not np.isfinite(loss) or loss > cfg.divergence_limit:
            raise DivergenceError(f"training diverged at iteration {it}: loss {loss:.6g} (lr {sched.lr:.3g})")
        grads, _ = clip_global_norm(grads, cfg.clip_norm)
        adam_step(adam, params, grads, sched.lr)
        running.append(loss)
        if it % cfg.val_interval == 0 or it == cfg.max_iters:
            val_nll = _validation_nll(net, val_set)
            lr_now = sched.update(it, val_nll)
            result.history.append((it, float(np.mean(running)), val_nll, lr_now))
            running = []
            if val_nll < result.best_val:
                result.best_val = val_nll
                result.best_iter = it
                best_params = {k: v.copy() for k, v in params.items()}
    net.set_parameters(best_params)
    return result


def save_checkpoint(path, params, config):
    """Write a text manifest (format version, config echo, tensor table)
    followed by the raw little-endian payload in manifest order."""
    names = sorted(params)
    header = io.StringIO()
    header.write(CHECKPOINT_MAGIC + "\n")
    for key in sorted(config):
        header.write(f"config {key} = {config[key]}\n")
    offset = 0
    blobs = []
    for name in names:
        arr = np.asarray(params[name])
        code = {4: "f4", 8: "f8"}[arr.dtype.itemsize]
        blob = arr.astype(f"<{code}", copy=False).tobytes(order="C")
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        header.write(f"tensor {name} {code} {shape} {offset} {len(blob)}\n")
        offset += len(blob)
        blobs.append(blob)
    header.write("end\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("ascii"))
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint back into (params, config); exact inverse of save."""
    with open(path, "rb") as fh:
        raw = fh.read()
    eol = raw.find(b"\n")
    if eol < 0 or raw[:eol].decode("ascii", "replace") != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic line)")
    config = {}
    tensors = []
    pos = eol + 1
    while True:
        eol = raw.find(b"\n", pos)
        if eol < 0:
            raise FormatError("unterminated checkpoint manifest")
        line = raw[pos:eol].decode("ascii")
        pos = eol + 1
        if line == "end":
            break
        if line.startswith("config "):
            key, _, value = line[len("config "):].partition(" = ")
            config[key] = value
        elif line.startswith("tensor "):
            name, code, shape, offset, nbytes = line[len("tensor "):].split(" ")
            tensors.append((name, code, shape, int(offset), int(nbytes)))
        else:
            raise FormatError(f"unrecognized manifest line: {line!r}")
    payload = raw[pos:]
    params = {}
    for name, code, shape, offset, nbytes in tensors:
        dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype=f"<{code}").reshape(dims)
        params[name] = arr.astype(arr.dtype.newbyteorder("="))
    return params, config
