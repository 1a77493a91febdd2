"""Trainable alignment heads mapping frozen vision features to text space.

Three variants: a single affine map, a two-layer GELU MLP, and one
pre-norm transformer block (multi-head self-attention over the patches
of one image, no positional terms, then a GELU feed-forward) followed by
a final affine to the text dimension. Outputs are l2-normalized per
patch. Forward returns a cache; backward consumes it and produces exact
analytic parameter gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

from ..exchange import read_tensor_f64, write_tensor
from ..numerics import seeded_rng

_LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass
class HeadConfig:
    variant: str = "linear"  # linear | mlp | transformer
    hidden: int = 64  # mlp hidden / transformer feed-forward width
    attention_heads: int = 4

    def __post_init__(self):
        if self.variant not in ("linear", "mlp", "transformer"):
            raise ValueError(f"unknown head variant {self.variant!r}")


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    phi = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * phi


def _unit_rows(y):
    norms = np.linalg.norm(y, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise ValueError("head produced a zero-norm output row")
    return y / norms, norms


def _unit_rows_grad(z, norms, dz):
    # z = y / |y|  =>  dy = (dz - z (z . dz)) / |y|
    return (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / norms


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class AlignmentHead:
    """Common surface: forward with cache, backward to parameter grads."""

    variant = ""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, normalize: bool = True):
        raise NotImplementedError

    def backward(self, cache, dz: np.ndarray) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def sgd_step(self, grads: dict[str, np.ndarray], lr: float,
                 momentum: float = 0.0, buffers: dict | None = None):
        for name, g in grads.items():
            if momentum > 0.0 and buffers is not None:
                buf = buffers.setdefault(name, np.zeros_like(g))
                buf *= momentum
                buf += g
                g = buf
            self.params[name] -= lr * g

    def _finish(self, y, normalize):
        if not normalize:
            return y, (None, None, False)
        z, norms = _unit_rows(y)
        return z, (z, norms, True)

    def _unfinish(self, norm_cache, dz):
        z, norms, normalized = norm_cache
        return _unit_rows_grad(z, norms, dz) if normalized else dz


class LinearHead(AlignmentHead):
    variant = "linear"

    def __init__(self, d_in: int, d_out: int, seed: int = 0):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        rng = seeded_rng(seed)
        self.params = {"w": _uniform(rng, d_in, (d_in, d_out)), "b": np.zeros(d_out)}

    def forward(self, x, normalize=True):
        y = x @ self.params["w"] + self.params["b"]
        z, norm_cache = self._finish(y, normalize)
        return z, (x, norm_cache)

    def backward(self, cache, dz):
        x, norm_cache = cache
        dy = self._unfinish(norm_cache, dz)
        return {"w": x.T @ dy, "b": dy.sum(axis=0)}


class MlpHead(AlignmentHead):
    variant = "mlp"

    def __init__(self, d_in: int, d_out: int, hidden: int, seed: int = 0):
        super().__init__()
        self.d_in, self.d_out, self.hidden = d_in, d_out, hidden
        rng = seeded_rng(seed)
        self.params = {
            "w1": _uniform(rng, d_in, (d_in, hidden)),
            "b1": np.zeros(hidden),
            "w2": _uniform(rng, hidden, (hidden, d_out)),
            "b2": np.zeros(d_out),
        }

    def forward(self, x, normalize=True):
        p = self.params
        h = x @ p["w1"] + p["b1"]
        g = _gelu(h)
        y = g @ p["w2"] + p["b2"]
        z, norm_cache = self._finish(y, normalize)
        return z, (x, h, g, norm_cache)

    def backward(self, cache, dz):
        x, h, g, norm_cache = cache
        p = self.params
        dy = self._unfinish(norm_cache, dz)
        dg = dy @ p["w2"].T
        dh = dg * _gelu_grad(h)
        return {
            "w1": x.T @ dh,
            "b1": dh.sum(axis=0),
            "w2": g.T @ dy,
            "b2": dy.sum(axis=0),
        }


def _layer_norm(x, gamma, beta):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv_std
    return xhat * gamma + beta, (xhat, inv_std)


def _layer_norm_grad(cache, gamma, dy):
    xhat, inv_std = cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )
    return dx, dgamma, dbeta


class TransformerHead(AlignmentHead):
    """Pre-norm block: LN, self-attention, residual, LN, GELU MLP, residual,
    then a final affine into the text dimension."""

    variant = "transformer"

    def __init__(self, d_in: int, d_out: int, hidden: int, heads: int = 4, seed: int = 0):
        super().__init__()
        if d_in % heads:
            raise ValueError(f"d_in {d_in} not divisible by {heads} attention heads")
        self.d_in, self.d_out, self.hidden, self.heads = d_in, d_out, hidden, heads
        rng = seeded_rng(seed)
        p = {}
        p["ln1_g"], p["ln1_b"] = np.ones(d_in), np.zeros(d_in)
        for name in ("wq", "wk", "wv", "wp"):
            p[name] = _uniform(rng, d_in, (d_in, d_in))
            p["b" + name[1]] = np.zeros(d_in)
        p["ln2_g"], p["ln2_b"] = np.ones(d_in), np.zeros(d_in)
        p["wf1"] = _uniform(rng, d_in, (d_in, hidden))
        p["bf1"] = np.zeros(hidden)
        p["wf2"] = _uniform(rng, hidden, (hidden, d_in))
        p["bf2"] = np.zeros(d_in)
        p["w_out"] = _uniform(rng, d_in, (d_in, d_out))
        p["b_out"] = np.zeros(d_out)
        self.params = p

    def _split(self, m):
        n = m.shape[0]
        return m.reshape(n, self.heads, -1).transpose(1, 0, 2)  # H x N x dh

    def _merge(self, m):
        return m.transpose(1, 0, 2).reshape(m.shape[1], self.d_in)

    def forward(self, x, normalize=True):
        p = self.params
        a_in, ln1_cache = _layer_norm(x, p["ln1_g"], p["ln1_b"])
        q = self._split(a_in @ p["wq"] + p["bq"])
        k = self._split(a_in @ p["wk"] + p["bk"])
        v = self._split(a_in @ p["wv"] + p["bv"])
        scale = 1.0 / np.sqrt(q.shape[-1])
        logits = np.einsum("hid,hjd->hij", q, k) * scale
        logits -= logits.max(axis=2, keepdims=True)
        attn = np.exp(logits)
        attn /= attn.sum(axis=2, keepdims=True)
        heads_out = np.einsum("hij,hjd->hid", attn, v)
        merged = self._merge(heads_out)
        u = x + merged @ p["wp"] + p["bp"]

        f_in, ln2_cache = _layer_norm(u, p["ln2_g"], p["ln2_b"])
        h = f_in @ p["wf1"] + p["bf1"]
        g = _gelu(h)
        v2 = u + g @ p["wf2"] + p["bf2"]

        y = v2 @ p["w_out"] + p["b_out"]
        z, norm_cache = self._finish(y, normalize)
        cache = (x, a_in, ln1_cache, q, k, v, attn, merged, f_in, ln2_cache, h, g,
                 v2, norm_cache)
        return z, cache

    def backward(self, cache, dz):
        (x, a_in, ln1_cache, q, k, v, attn, merged, f_in, ln2_cache, h, g,
         v2, norm_cache) = cache
        p = self.params
        grads = {}

        dy = self._unfinish(norm_cache, dz)
        grads["w_out"] = v2.T @ dy
        grads["b_out"] = dy.sum(axis=0)
        dv2 = dy @ p["w_out"].T

        # feed-forward branch (residual: dv2 also flows straight to du)
        df_out = dv2
        grads["wf2"] = g.T @ df_out
        grads["bf2"] = df_out.sum(axis=0)
        dg = df_out @ p["wf2"].T
        dh = dg * _gelu_grad(h)
        grads["wf1"] = f_in.T @ dh
        grads["bf1"] = dh.sum(axis=0)
        df_in = dh @ p["wf1"].T
        dln2, grads["ln2_g"], grads["ln2_b"] = _layer_norm_grad(ln2_cache, p["ln2_g"], df_in)
        du = dv2 + dln2

        # attention branch (residual: du also flows straight to dx)
        dproj = du
        grads["wp"] = merged.T @ dproj
        grads["bp"] = dproj.sum(axis=0)
        dmerged = dproj @ p["wp"].T
        dheads = self._split(dmerged)

        dattn = np.einsum("hid,hjd->hij", dheads, v)
        dv_h = np.einsum("hij,hid->hjd", attn, dheads)
        # softmax backward per row
        dlogits = attn * (dattn - (dattn * attn).sum(axis=2, keepdims=True))
        scale = 1.0 / np.sqrt(q.shape[-1])
        dq_h = np.einsum("hij,hjd->hid", dlogits, k) * scale
        dk_h = np.einsum("hij,hid->hjd", dlogits, q) * scale

        dq = self._merge(dq_h)
        dk = self._merge(dk_h)
        dv = self._merge(dv_h)
        grads["wq"] = a_in.T @ dq
        grads["bq"] = dq.sum(axis=0)
        grads["wk"] = a_in.T @ dk
        grads["bk"] = dk.sum(axis=0)
        grads["wv"] = a_in.T @ dv
        grads["bv"] = dv.sum(axis=0)
        da_in = dq @ p["wq"].T + dk @ p["wk"].T + dv @ p["wv"].T
        _, grads["ln1_g"], grads["ln1_b"] = _layer_norm_grad(ln1_cache, p["ln1_g"], da_in)
        # dx would add dln1 + du; inputs are frozen features, not needed.
        return grads


def create_head(variant: str, d_in: int, d_out: int, config: HeadConfig,
                seed: int = 0) -> AlignmentHead:
    if variant == "linear":
        return LinearHead(d_in, d_out, seed=seed)
    if variant == "mlp":
        return MlpHead(d_in, d_out, config.hidden, seed=seed)
    if variant == "transformer":
        return TransformerHead(d_in, d_out, config.hidden, config.attention_heads, seed=seed)
    raise ValueError(f"unknown head variant {variant!r}")


def save_head(directory, head: AlignmentHead, step_count: int) -> None:
    """Checkpoint: a JSON descriptor plus one tensor file per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    desc = {
        "variant": head.variant,
        "d_in": head.d_in,
        "d_out": head.d_out,
        "hidden": getattr(head, "hidden", None),
        "attention_heads": getattr(head, "heads", None),
        "step_count": int(step_count),
        "parameters": sorted(head.params),
    }
    for name, value in head.params.items():
        write_tensor(directory / f"{name}.fmsg", value)
    (directory / "descriptor.json").write_text(
        json.dumps(desc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_head(directory) -> AlignmentHead:
    directory = Path(directory)
    desc = json.loads((directory / "descriptor.json").read_text(encoding="utf-8"))
    config = HeadConfig(
        variant=desc["variant"],
        hidden=desc["hidden"] or 64,
        attention_heads=desc["attention_heads"] or 4,
    )
    head = create_head(desc["variant"], desc["d_in"], desc["d_out"], config, seed=0)
    for name in desc["parameters"]:
        value = read_tensor_f64(directory / f"{name}.fmsg")
        if value.shape != head.params[name].shape:
            if value.size == head.params[name].size:
                value = value.reshape(head.params[name].shape)
            else:
                raise ValueError(f"checkpoint parameter {name}: shape {value.shape} unexpected")
        head.params[name] = value
    return head
