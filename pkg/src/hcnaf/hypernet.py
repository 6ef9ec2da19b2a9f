"""Hyper-network: an MLP from the condition vector to every weight and bias
of the conditional flow, plus exact parameter accounting.

The network is an optional shared trunk followed by two branches, one feeding
the flow-weight slots and one the flow-bias slots. Each branch is a ReLU
hidden layer (its width is the head width) and a linear output map. Output
maps start at zero with a structured bias, so a freshly initialized network
emits the same identity-like flow for every condition; the trunk and hidden
branch layers carry the seeded randomness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .errors import NumericError
from .flow_core import CondAFConfig, FlowParams, affine_log_prob, log_prob


@dataclass(frozen=True)
class HyperNetConfig:
    """Shape of the hyper-network.

    cond_dim: length of the condition vector.
    trunk_widths: widths of shared hidden layers before the branches (may be
        empty, in which case both branches read the raw condition).
    head_width_w / head_width_b: width of the hidden layer in the branch that
        produces the flow weights / biases.
    """

    cond_dim: int
    trunk_widths: tuple = ()
    head_width_w: int = 64
    head_width_b: int = 64

    def __post_init__(self):
        if self.cond_dim < 1:
            raise ValueError("cond_dim must be >= 1")
        object.__setattr__(self, "trunk_widths", tuple(int(w) for w in self.trunk_widths))
        if any(w < 1 for w in self.trunk_widths):
            raise ValueError("trunk widths must be >= 1")
        if self.head_width_w < 1 or self.head_width_b < 1:
            raise ValueError("head widths must be >= 1")


def _slot_layout(af: CondAFConfig):
    """Slices of the weight-head output vector holding each layer's diagonal
    logs and strictly-lower blocks, in storage order."""
    slots = []
    pos = 0
    for k in range(af.n_weight_layers):
        bh, bw = af.block_shape(k)
        n_diag = af.dim * bh * bw
        n_off = af.n_lower_blocks * bh * bw
        slots.append(
            {
                "diag": (slice(pos, pos + n_diag), (af.dim, bh, bw)),
                "off": (slice(pos + n_diag, pos + n_diag + n_off), (af.n_lower_blocks, bh, bw)),
            }
        )
        pos += n_diag + n_off
    return slots, pos


def _bias_layout(af: CondAFConfig):
    slots = []
    pos = 0
    for k in range(af.n_weight_layers):
        bh, _ = af.block_shape(k)
        n = af.dim * bh
        slots.append((slice(pos, pos + n), (n,)))
        pos += n
    return slots, pos


def stored_weight_count(af: CondAFConfig):
    """Number of weight entries actually stored (diagonal + strictly-lower
    blocks); the structural zeros above the diagonal are never allocated."""
    return _slot_layout(af)[1]


def param_counts(af: CondAFConfig, hn: HyperNetConfig):
    """Exact parameter accounting for a flow/hyper-network pair.

    flow_w counts the full masked weight matrices including structural zeros;
    flow_w_stored is the mask-compressed count actually emitted. hyper is the
    number of trainable entries in the hyper-network; total sums all three
    groups the way the architecture composes them.
    """
    d, h, l = af.dim, af.width_per_dim, af.hidden_layers
    flow_w = d * d * h * (2 + (l - 1) * h)
    flow_b = d * (h * l + 1)
    s_w = stored_weight_count(af)
    s_b = _bias_layout(af)[1]
    hyper = 0
    fan = hn.cond_dim
    for w in hn.trunk_widths:
        hyper += fan * w + w
        fan = w
    hyper += fan * hn.head_width_w + hn.head_width_w
    hyper += hn.head_width_w * s_w + s_w
    hyper += fan * hn.head_width_b + hn.head_width_b
    hyper += hn.head_width_b * s_b + s_b
    return {
        "flow_w": flow_w,
        "flow_b": flow_b,
        "hyper": hyper,
        "total": flow_w + flow_b + hyper,
        "flow_w_stored": s_w,
    }


def group_by_condition(cond):
    """Deterministic grouping of condition rows: list of (row, indices)."""
    cond = np.asarray(cond)
    if cond.ndim == 1:
        cond = cond.reshape(-1, 1)
    uniq, inverse = np.unique(cond, axis=0, return_inverse=True)
    return [(uniq[i], np.nonzero(inverse == i)[0]) for i in range(uniq.shape[0])]


class HyperNet:
    """Trainable map from a condition vector to one conditioned flow."""

    kind = "hcnaf"

    def __init__(self, af: CondAFConfig, cfg: HyperNetConfig, seed=0, dtype=np.float64, init_jitter=0.3):
        self.af = af
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.init_jitter = float(init_jitter)
        self._w_slots, self._n_w = _slot_layout(af)
        self._b_slots, self._n_b = _bias_layout(af)
        self.params = self._init_params(seed)

    def _init_params(self, seed):
        rng = np.random.default_rng(int(seed))

        def uniform(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape).astype(self.dtype)

        p = {}
        fan = self.cfg.cond_dim
        for i, w in enumerate(self.cfg.trunk_widths):
            p[f"trunk.{i}.w"] = uniform(fan, (fan, w))
            p[f"trunk.{i}.b"] = uniform(fan, (w,))
            fan = w
        for name, width in (("w_stem", self.cfg.head_width_w), ("b_stem", self.cfg.head_width_b)):
            p[f"{name}.w"] = uniform(fan, (fan, width))
            p[f"{name}.b"] = uniform(fan, (width,))
        ident = FlowParams.identity_like(self.af, unit_jitter=self.init_jitter, dtype=self.dtype)
        w_bias = np.zeros(self._n_w, dtype=self.dtype)
        for k, slot in enumerate(self._w_slots):
            sl, shape = slot["diag"]
            w_bias[sl] = ident.w_log_diag[k].reshape(-1)
        b_bias = np.zeros(self._n_b, dtype=self.dtype)
        for k, (sl, shape) in enumerate(self._b_slots):
            b_bias[sl] = ident.bias[k]
        p["w_out.w"] = np.zeros((self.cfg.head_width_w, self._n_w), dtype=self.dtype)
        p["w_out.b"] = w_bias
        p["b_out.w"] = np.zeros((self.cfg.head_width_b, self._n_b), dtype=self.dtype)
        p["b_out.b"] = b_bias
        return p

    def parameters(self):
        return self.params

    def set_parameters(self, params):
        self.params = {k: np.asarray(v, dtype=self.dtype) for k, v in params.items()}

    def _features(self, p, row):
        h = row
        for i in range(len(self.cfg.trunk_widths)):
            h = tc.relu(tc.add(tc.matmul(h, p[f"trunk.{i}.w"]), p[f"trunk.{i}.b"]))
        return h

    def _emit_stacked(self, p, rows):
        """Head outputs for a stack of condition rows: (n, slots) pairs."""
        rows = np.asarray(rows, dtype=self.dtype)
        if rows.ndim != 2 or rows.shape[1] != self.cfg.cond_dim:
            raise ValueError(f"conditions must have length {self.cfg.cond_dim}")
        if not np.all(np.isfinite(rows)):
            raise ValueError("condition contains non-finite entries")
        feats = self._features(p, rows)
        hw = tc.relu(tc.add(tc.matmul(feats, p["w_stem.w"]), p["w_stem.b"]))
        w_vec = tc.add(tc.matmul(hw, p["w_out.w"]), p["w_out.b"])
        hb = tc.relu(tc.add(tc.matmul(feats, p["b_stem.w"]), p["b_stem.b"]))
        b_vec = tc.add(tc.matmul(hb, p["b_out.w"]), p["b_out.b"])
        return w_vec, b_vec

    def _slice_flow_params(self, w_vec, b_vec, i):
        wld, woff, bias = [], [], []
        for slot in self._w_slots:
            sl, shape = slot["diag"]
            wld.append(tc.reshape(tc.take(w_vec, (i, sl)), shape))
            sl, shape = slot["off"]
            woff.append(tc.reshape(tc.take(w_vec, (i, sl)), shape))
        for sl, shape in self._b_slots:
            bias.append(tc.reshape(tc.take(b_vec, (i, sl)), shape))
        return FlowParams(self.af, tuple(wld), tuple(woff), tuple(bias))

    def emit(self, p, c):
        """FlowParams for one condition, from a parameter set (arrays during
        evaluation, tape values during training)."""
        c = np.asarray(c, dtype=self.dtype).reshape(1, -1)
        w_vec, b_vec = self._emit_stacked(p, c)
        return self._slice_flow_params(w_vec, b_vec, 0)

    def hyper_forward(self, c):
        """FlowParams for one condition using the live parameters."""
        return self.emit(self.params, c)

    def nll(self, p, x, cond):
        """Mean negative log-density of a conditioned batch; each sample's
        flow comes from its own condition (identical conditions share one
        emission)."""
        x = np.asarray(x, dtype=self.dtype)
        n = x.shape[0]
        if n == 0:
            raise ValueError("batch must be non-empty")
        groups = group_by_condition(cond)
        rows = np.stack([row for row, _ in groups])
        w_vec, b_vec = self._emit_stacked(p, rows)
        total = None
        for i, (_, idx) in enumerate(groups):
            fp = self._slice_flow_params(w_vec, b_vec, i)
            lp = log_prob(self.af, fp, x[idx], check=False)
            vals = lp.value if isinstance(lp, tc.Var) else lp
            if not np.all(np.isfinite(vals)):
                bad = int(idx[np.argmax(~np.isfinite(vals))])
                raise NumericError(f"non-finite log-density for sample {bad}")
            s = tc.reduce_sum(lp)
            total = s if total is None else tc.add(total, s)
        return tc.mul(total, -1.0 / n)

    def log_prob_for_condition(self, x, c, chunk=512):
        """Log-density of points (n, D) under the flow for a single condition."""
        fp = self.hyper_forward(c)
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return log_prob(self.af, fp, x)
        outs = [log_prob(self.af, fp, x[i:i + chunk]) for i in range(0, x.shape[0], chunk)]
        return np.concatenate(outs)

    def log_prob_batch(self, x, cond, chunk=512):
        """Per-sample log-density with per-sample conditions."""
        x = np.asarray(x, dtype=np.float64)
        out = np.empty(x.shape[0])
        for row, idx in group_by_condition(cond):
            fp = self.hyper_forward(row)
            for j in range(0, idx.size, chunk):
                sel = idx[j:j + chunk]
                out[sel] = log_prob(self.af, fp, x[sel])
        return out

    def sample_for_condition(self, n, c, seed):
        from .flow_core import sample

        return sample(self.af, self.hyper_forward(c), n, seed)

    def config_echo(self):
        return {
            "model.kind": self.kind,
            "flow.dim": str(self.af.dim),
            "flow.hidden_layers": str(self.af.hidden_layers),
            "flow.width_per_dim": str(self.af.width_per_dim),
            "hyper.cond_dim": str(self.cfg.cond_dim),
            "hyper.trunk_widths": ",".join(str(w) for w in self.cfg.trunk_widths),
            "hyper.head_width_w": str(self.cfg.head_width_w),
            "hyper.head_width_b": str(self.cfg.head_width_b),
        }

    @classmethod
    def from_config_echo(cls, echo, dtype=np.float64):
        af = CondAFConfig(
            dim=int(echo["flow.dim"]),
            hidden_layers=int(echo["flow.hidden_layers"]),
            width_per_dim=int(echo["flow.width_per_dim"]),
        )
        widths = tuple(int(w) for w in echo["hyper.trunk_widths"].split(",") if w)
        cfg = HyperNetConfig(
            cond_dim=int(echo["hyper.cond_dim"]),
            trunk_widths=widths,
            head_width_w=int(echo["hyper.head_width_w"]),
            head_width_b=int(echo["hyper.head_width_b"]),
        )
        return cls(af, cfg, seed=0, dtype=dtype)


def init(net: HyperNet, seed):
    """Freshly initialized copy of a hyper-network: random trunk and branch
    hidden layers, zeroed output maps with the identity-emitting bias."""
    return HyperNet(net.af, net.cfg, seed=seed, dtype=net.dtype, init_jitter=net.init_jitter)


class AffineConditional:
    """Hyper-network for the affine baseline: maps a condition to a
    per-dimension mean and log-scale instead of full flow weights."""

    kind = "affine"

    def __init__(self, dim, cfg: HyperNetConfig, seed=0, dtype=np.float64):
        self.dim = dim
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = self._init_params(seed)

    def _init_params(self, seed):
        rng = np.random.default_rng(int(seed))

        def uniform(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape).astype(self.dtype)

        p = {}
        fan = self.cfg.cond_dim
        for i, w in enumerate(self.cfg.trunk_widths):
            p[f"trunk.{i}.w"] = uniform(fan, (fan, w))
            p[f"trunk.{i}.b"] = uniform(fan, (w,))
            fan = w
        p["stem.w"] = uniform(fan, (fan, self.cfg.head_width_w))
        p["stem.b"] = uniform(fan, (self.cfg.head_width_w,))
        p["out.w"] = np.zeros((self.cfg.head_width_w, 2 * self.dim), dtype=self.dtype)
        p["out.b"] = np.zeros(2 * self.dim, dtype=self.dtype)
        return p

    def parameters(self):
        return self.params

    def set_parameters(self, params):
        self.params = {k: np.asarray(v, dtype=self.dtype) for k, v in params.items()}

    def emit(self, p, c):
        c = np.asarray(c, dtype=self.dtype).reshape(1, -1)
        h = c
        for i in range(len(self.cfg.trunk_widths)):
            h = tc.relu(tc.add(tc.matmul(h, p[f"trunk.{i}.w"]), p[f"trunk.{i}.b"]))
        h = tc.relu(tc.add(tc.matmul(h, p["stem.w"]), p["stem.b"]))
        out = tc.add(tc.matmul(h, p["out.w"]), p["out.b"])
        mu = tc.take(out, (0, slice(0, self.dim)))
        log_sigma = tc.take(out, (0, slice(self.dim, 2 * self.dim)))
        return mu, log_sigma

    def nll(self, p, x, cond):
        x = np.asarray(x, dtype=self.dtype)
        n = x.shape[0]
        if n == 0:
            raise ValueError("batch must be non-empty")
        total = None
        for row, idx in group_by_condition(cond):
            mu, log_sigma = self.emit(p, row)
            lp = affine_log_prob(mu, log_sigma, x[idx])
            s = tc.reduce_sum(lp)
            total = s if total is None else tc.add(total, s)
        return tc.mul(total, -1.0 / n)

    def log_prob_for_condition(self, x, c, chunk=None):
        mu, log_sigma = self.emit(self.params, c)
        return affine_log_prob(mu, log_sigma, np.asarray(x, dtype=np.float64))

    def log_prob_batch(self, x, cond, chunk=None):
        x = np.asarray(x, dtype=np.float64)
        out = np.empty(x.shape[0])
        for row, idx in group_by_condition(cond):
            mu, log_sigma = self.emit(self.params, row)
            out[idx] = affine_log_prob(mu, log_sigma, x[idx])
        return out

    def config_echo(self):
        return {
            "model.kind": self.kind,
            "flow.dim": str(self.dim),
            "hyper.cond_dim": str(self.cfg.cond_dim),
            "hyper.trunk_widths": ",".join(str(w) for w in self.cfg.trunk_widths),
            "hyper.head_width_w": str(self.cfg.head_width_w),
            "hyper.head_width_b": str(self.cfg.head_width_b),
        }

    @classmethod
    def from_config_echo(cls, echo, dtype=np.float64):
        widths = tuple(int(w) for w in echo["hyper.trunk_widths"].split(",") if w)
        cfg = HyperNetConfig(
            cond_dim=int(echo["hyper.cond_dim"]),
            trunk_widths=widths,
            head_width_w=int(echo["hyper.head_width_w"]),
            head_width_b=int(echo["hyper.head_width_b"]),
        )
        return cls(int(echo["flow.dim"]), cfg, seed=0, dtype=dtype)
