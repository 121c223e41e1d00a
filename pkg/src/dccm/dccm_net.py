"""Metric/gain network: (x, r) -> symmetric M(x,r) and gain K(x,r).

One fully connected tanh network emits the n(n+1)/2 upper-triangle entries of
M followed by the m*n entries of K.  Inputs are affinely scaled to [-1,1]
using the state and parameter boxes recorded with the weights.  The same
architecture can be evaluated three ways: plain numpy (fast path for control
and verification), numpy with a forward-mode state Jacobian (geodesic
gradients), and as diffcore expressions with weights as graph inputs (loss
backpropagation, shared across the Siamese branches).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .plant import Box

_FORMAT = "dccm-net"
_VERSION = 1


@dataclass(frozen=True)
class Layer:
    w: np.ndarray
    b: np.ndarray
    act: str  # "tanh" or "identity"


@dataclass(frozen=True)
class NetworkWeights:
    """Immutable weight bundle plus the scaling boxes it was trained with."""

    n: int
    m: int
    ell: int
    layers: tuple
    x_box: Box
    r_box: Box

    @property
    def n_metric(self) -> int:
        return self.n * (self.n + 1) // 2

    @property
    def n_outputs(self) -> int:
        return self.n_metric + self.m * self.n


@dataclass(frozen=True)
class MetricGainPair:
    M: np.ndarray
    K: np.ndarray


def tri_indices(n: int):
    """Upper-triangle (i, j) pairs in row-major order, i <= j."""
    return [(i, j) for i in range(n) for j in range(i, n)]


def init_weights(n, m, ell, hidden, x_box: Box, r_box: Box, seed) -> NetworkWeights:
    """Seeded uniform init in +-1/sqrt(fan-in), hidden tanh, identity output."""
    widths = [n + ell, *hidden, n * (n + 1) // 2 + m * n]
    rng = np.random.default_rng(seed)
    layers = []
    for k in range(len(widths) - 1):
        fan_in, fan_out = widths[k], widths[k + 1]
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        act = "identity" if k == len(widths) - 2 else "tanh"
        layers.append(Layer(w, b, act))
    return NetworkWeights(n, m, ell, tuple(layers), x_box, r_box)


def _scaled_inputs(w: NetworkWeights, x, r) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    return np.concatenate(
        [w.x_box.to_unit(x), w.r_box.to_unit(r)], axis=-1
    )


def _forward(w: NetworkWeights, h: np.ndarray) -> np.ndarray:
    for layer in w.layers:
        h = h @ layer.w.T + layer.b
        if layer.act == "tanh":
            h = np.tanh(h)
    return h


def _unpack(w: NetworkWeights, out: np.ndarray):
    batch = out.shape[:-1]
    mm = np.zeros(batch + (w.n, w.n))
    for k, (i, j) in enumerate(tri_indices(w.n)):
        mm[..., i, j] = out[..., k]
        mm[..., j, i] = out[..., k]
    kk = out[..., w.n_metric :].reshape(batch + (w.m, w.n))
    return mm, kk


def evaluate(w: NetworkWeights, x, r) -> MetricGainPair:
    """Metric and gain at one (x, r); pure and deterministic."""
    x = np.asarray(x, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if x.shape != (w.n,) or r.shape != (w.ell,):
        raise ValueError(
            f"expected shapes ({w.n},) and ({w.ell},), got {x.shape} and {r.shape}"
        )
    mm, kk = _unpack(w, _forward(w, _scaled_inputs(w, x, r)))
    return MetricGainPair(mm, kk)


def evaluate_many(w: NetworkWeights, xs, rs):
    """Batched evaluation: xs (B,n), rs (B,ell) -> M (B,n,n), K (B,m,n)."""
    xs = np.asarray(xs, dtype=np.float64)
    rs = np.asarray(rs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != w.n or rs.shape != (xs.shape[0], w.ell):
        raise ValueError("batch shapes must be (B,n) and (B,ell)")
    return _unpack(w, _forward(w, _scaled_inputs(w, xs, rs)))


def evaluate_siamese(w: NetworkWeights, x_k, x_next, r):
    """Weight-shared pair: (M, K) at x_k and the metric at x_next."""
    pair_k = evaluate(w, x_k, r)
    m_next = evaluate(w, x_next, r).M
    return pair_k, m_next


def evaluate_with_state_jacobian(w: NetworkWeights, xs, rs):
    """As evaluate_many plus dM/dx with shape (B, n, n, n), last axis = d/dx_d.

    The Jacobian is propagated in closed form through the scaling and the
    tanh layers (forward mode), so it is exact up to floating point.
    """
    xs = np.asarray(xs, dtype=np.float64)
    rs = np.asarray(rs, dtype=np.float64)
    h = _scaled_inputs(w, xs, rs)
    batch = xs.shape[0]
    span = w.x_box.upper - w.x_box.lower
    span = np.where(span > 0.0, span, 1.0)
    jac = np.zeros((batch, w.n + w.ell, w.n))
    jac[:, : w.n, :] = np.diag(2.0 / span)
    for layer in w.layers:
        h = h @ layer.w.T + layer.b
        jac = np.einsum("oi,bid->bod", layer.w, jac)
        if layer.act == "tanh":
            h = np.tanh(h)
            jac = (1.0 - h * h)[..., None] * jac
    mm, kk = _unpack(w, h)
    dm = np.zeros((batch, w.n, w.n, w.n))
    for k, (i, j) in enumerate(tri_indices(w.n)):
        dm[:, i, j, :] = jac[:, k, :]
        dm[:, j, i, :] = jac[:, k, :]
    return mm, kk, dm


# -- diffcore bridge ---------------------------------------------------------

def flat_weights(w: NetworkWeights) -> np.ndarray:
    """All parameters as one vector: per layer, W row-major then b."""
    parts = []
    for layer in w.layers:
        parts.append(layer.w.ravel())
        parts.append(layer.b)
    return np.concatenate(parts)


def with_flat_weights(w: NetworkWeights, vec: np.ndarray) -> NetworkWeights:
    """Rebuild weights from a flat vector in flat_weights order."""
    vec = np.asarray(vec, dtype=np.float64)
    layers = []
    pos = 0
    for layer in w.layers:
        size = layer.w.size
        new_w = vec[pos : pos + size].reshape(layer.w.shape)
        pos += size
        new_b = vec[pos : pos + layer.b.size].copy()
        pos += layer.b.size
        layers.append(Layer(new_w, new_b, layer.act))
    if pos != vec.size:
        raise ValueError(f"expected {pos} parameters, got {vec.size}")
    return NetworkWeights(w.n, w.m, w.ell, tuple(layers), w.x_box, w.r_box)


def graph_inputs(g, w: NetworkWeights):
    """Create one graph input per parameter, in flat_weights order.

    Returns (structured, flat): structured mirrors the layer list as nested
    expression lists, flat is the creation-order list used to feed values.
    """
    structured = []
    flat = []
    for layer in w.layers:
        rows = []
        for i in range(layer.w.shape[0]):
            row = g.inputs(layer.w.shape[1])
            rows.append(row)
            flat.extend(row)
        bias = g.inputs(layer.b.shape[0])
        flat.extend(bias)
        structured.append((rows, bias, layer.act))
    return structured, flat


def graph_forward(g, structured, w: NetworkWeights, x_exprs, r_exprs):
    """Network output expressions for one evaluation point.

    x_exprs and r_exprs are raw (unscaled) inputs; scaling constants come from
    the boxes stored on w.  Reusing the same structured weight expressions for
    a second call shares parameters across Siamese branches.  Returns the
    symmetric metric matrix and the gain matrix as expression lists.
    """
    from . import diffcore

    if len(x_exprs) != w.n or len(r_exprs) != w.ell:
        raise ValueError("input expression counts do not match network dims")
    h = []
    for exprs, box in ((x_exprs, w.x_box), (r_exprs, w.r_box)):
        span = box.upper - box.lower
        for i, e in enumerate(exprs):
            s = span[i] if span[i] > 0.0 else 1.0
            h.append((e - box.lower[i]) * 2.0 / s - 1.0)
    for rows, bias, act in structured:
        nxt = []
        for row, b in zip(rows, bias):
            acc = b
            for wi, hi in zip(row, h):
                acc = acc + wi * hi
            nxt.append(diffcore.tanh(acc) if act == "tanh" else acc)
        h = nxt
    mm = [[None] * w.n for _ in range(w.n)]
    for k, (i, j) in enumerate(tri_indices(w.n)):
        mm[i][j] = h[k]
        mm[j][i] = h[k]
    kk = [
        [h[w.n_metric + i * w.n + j] for j in range(w.n)] for i in range(w.m)
    ]
    return mm, kk


# -- persistence -------------------------------------------------------------

def _hex_list(arr) -> list:
    return [float(v).hex() for v in np.asarray(arr, dtype=np.float64).ravel()]


def _from_hex(values, shape):
    out = np.array([float.fromhex(v) for v in values], dtype=np.float64)
    return out.reshape(shape)


def serialize(w: NetworkWeights) -> str:
    """Versioned JSON text; floats stored as hex for lossless round-trips."""
    doc = {
        "format": _FORMAT,
        "version": _VERSION,
        "n": w.n,
        "m": w.m,
        "ell": w.ell,
        "x_box": {"lower": _hex_list(w.x_box.lower), "upper": _hex_list(w.x_box.upper)},
        "r_box": {"lower": _hex_list(w.r_box.lower), "upper": _hex_list(w.r_box.upper)},
        "layers": [
            {
                "act": layer.act,
                "rows": layer.w.shape[0],
                "cols": layer.w.shape[1],
                "w": _hex_list(layer.w),
                "b": _hex_list(layer.b),
            }
            for layer in w.layers
        ],
    }
    return json.dumps(doc, indent=1)


def deserialize(text: str) -> NetworkWeights:
    try:
        doc = json.loads(text)
        fmt, version = doc["format"], doc["version"]
        n, m, ell = int(doc["n"]), int(doc["m"]), int(doc["ell"])
        x_box = Box(
            _from_hex(doc["x_box"]["lower"], (n,)),
            _from_hex(doc["x_box"]["upper"], (n,)),
        )
        r_box = Box(
            _from_hex(doc["r_box"]["lower"], (ell,)),
            _from_hex(doc["r_box"]["upper"], (ell,)),
        )
        layers = []
        for spec in doc["layers"]:
            rows, cols = int(spec["rows"]), int(spec["cols"])
            layers.append(
                Layer(
                    _from_hex(spec["w"], (rows, cols)),
                    _from_hex(spec["b"], (rows,)),
                    str(spec["act"]),
                )
            )
    except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
        raise ValueError(f"unreadable weight file: {exc}") from exc
    if fmt != _FORMAT or version != _VERSION:
        raise ValueError(f"unsupported weight format {fmt!r} version {version!r}")
    if not layers:
        raise ValueError("weight file declares no layers")
    widths = [n + ell] + [layer.w.shape[0] for layer in layers]
    for k, layer in enumerate(layers):
        if layer.w.shape[1] != widths[k]:
            raise ValueError(
                f"layer {k} expects {layer.w.shape[1]} inputs, previous width is {widths[k]}"
            )
        if layer.b.shape[0] != layer.w.shape[0]:
            raise ValueError(f"layer {k} bias length mismatches its weight rows")
        if layer.act not in ("tanh", "identity"):
            raise ValueError(f"layer {k} has unknown activation {layer.act!r}")
    if layers[-1].act != "identity":
        raise ValueError("final layer activation must be identity")
    expected = n * (n + 1) // 2 + m * n
    if widths[-1] != expected:
        raise ValueError(
            f"final width {widths[-1]} does not match n(n+1)/2 + m*n = {expected}"
        )
    return NetworkWeights(n, m, ell, tuple(layers), x_box, r_box)


def save_weights(w: NetworkWeights, path):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(serialize(w))


def load_weights(path) -> NetworkWeights:
    with open(path, "r", encoding="ascii") as fh:
        return deserialize(fh.read())
