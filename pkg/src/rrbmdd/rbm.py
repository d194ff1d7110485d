"""Three-layer Restricted Boltzmann Machine (visible / hidden / one-hot class).

Visible units take soft values in [0, 1]; hidden units are Bernoulli; the class
layer is a softmax over ``Z`` one-hot states.  Every function accepts either a
single state vector or a batch with one state per row.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    """Raised when an array does not match the layer sizes of the model."""


@dataclass
class RbmParams:
    W: np.ndarray  # (V, H) visible-hidden weights
    U: np.ndarray  # (H, Z) hidden-class weights
    a: np.ndarray  # (V,) visible biases
    b: np.ndarray  # (H,) hidden biases
    c: np.ndarray  # (Z,) class biases

    def __post_init__(self) -> None:
        V, H = self.W.shape
        if self.U.shape[0] != H or self.a.shape != (V,) or self.b.shape != (H,):
            raise ShapeError(
                f"inconsistent parameter shapes W{self.W.shape} U{self.U.shape} "
                f"a{self.a.shape} b{self.b.shape} c{self.c.shape}"
            )
        if self.c.shape != (self.U.shape[1],):
            raise ShapeError(f"class bias has shape {self.c.shape}, expected ({self.U.shape[1]},)")
        if H < 1:
            raise ShapeError("at least one hidden unit is required")

    @property
    def V(self) -> int:
        return self.W.shape[0]

    @property
    def H(self) -> int:
        return self.W.shape[1]

    @property
    def Z(self) -> int:
        return self.U.shape[1]

    def copy(self) -> RbmParams:
        return RbmParams(self.W.copy(), self.U.copy(), self.a.copy(), self.b.copy(), self.c.copy())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in (self.W, self.U, self.a, self.b, self.c))

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in (self.W, self.U, self.a, self.b, self.c)])

    @classmethod
    def zeros(cls, V: int, H: int, Z: int) -> RbmParams:
        return cls(np.zeros((V, H)), np.zeros((H, Z)), np.zeros(V), np.zeros(H), np.zeros(Z))

    @classmethod
    def initialize(cls, V: int, H: int, Z: int, rng: np.random.Generator, std: float = 0.01) -> RbmParams:
        """Gaussian weights with mean 0 and the given std; biases start at zero."""
        return cls(
            rng.normal(0.0, std, size=(V, H)),
            rng.normal(0.0, std, size=(H, Z)),
            np.zeros(V),
            np.zeros(H),
            np.zeros(Z),
        )


def default_hidden_units(n_features: int, ratio: float = 0.5) -> int:
    return max(2, int(np.ceil(ratio * n_features)))


@dataclass
class LayerState:
    v: np.ndarray
    h: np.ndarray
    z: np.ndarray | None


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so that large |x| never overflows exp
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _check_last_dim(x: np.ndarray, size: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2) or x.shape[-1] != size:
        raise ShapeError(f"{name} has shape {x.shape}, expected last dimension {size}")
    return x


def hidden_activation_probs(v: np.ndarray, z: np.ndarray | None, params: RbmParams) -> np.ndarray:
    """P(h_j = 1 | v, z).  ``z=None`` (or an all-zero row) drops the class term."""
    v = _check_last_dim(v, params.V, "v")
    pre = params.b + v @ params.W
    if z is not None:
        z = _check_last_dim(z, params.Z, "z")
        pre = pre + z @ params.U.T
    return sigmoid(pre)


def visible_activation_probs(h: np.ndarray, params: RbmParams) -> np.ndarray:
    """P(v_i = 1 | h).  The class layer plays no part here."""
    h = _check_last_dim(h, params.H, "h")
    return sigmoid(params.a + h @ params.W.T)


def class_logits(h: np.ndarray, params: RbmParams) -> np.ndarray:
    h = _check_last_dim(h, params.H, "h")
    return params.c + h @ params.U


def class_activation_probs(h: np.ndarray, params: RbmParams) -> np.ndarray:
    """Softmax over the class layer.

    Larger ``c_k + sum_j h_j u_jk`` gives a larger probability, which keeps the
    class conditional consistent with the energy function.
    """
    if params.Z < 2:
        raise ShapeError("class layer needs at least two units")
    return softmax(class_logits(h, params))


def energy(v: np.ndarray, h: np.ndarray, z: np.ndarray, params: RbmParams) -> float | np.ndarray:
    v = _check_last_dim(v, params.V, "v")
    h = _check_last_dim(h, params.H, "h")
    z = _check_last_dim(z, params.Z, "z")
    return -(
        v @ params.a
        + h @ params.b
        + z @ params.c
        + np.sum((v @ params.W) * h, axis=-1)
        + np.sum((h @ params.U) * z, axis=-1)
    )


def sample_bernoulli(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(p.shape) < p).astype(float)


def sample_categorical(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One-hot samples from row-wise categorical distributions."""
    p2 = np.atleast_2d(p)
    u = rng.random((p2.shape[0], 1))
    idx = np.minimum((np.cumsum(p2, axis=1) < u).sum(axis=1), p2.shape[1] - 1)
    out = np.zeros_like(p2)
    out[np.arange(p2.shape[0]), idx] = 1.0
    return out.reshape(p.shape)


def gibbs_step(
    state: LayerState,
    params: RbmParams,
    rng: np.random.Generator,
    sample_visible: bool = False,
) -> LayerState:
    """One sweep v,z -> h -> (v, z).

    Hidden units are sampled.  Visible units are returned as probabilities unless
    ``sample_visible``; the class layer is sampled to a one-hot vector.  A state
    without a class vector stays unlabeled.
    """
    h = sample_bernoulli(hidden_activation_probs(state.v, state.z, params), rng)
    pv = visible_activation_probs(h, params)
    v = sample_bernoulli(pv, rng) if sample_visible else pv
    z = None
    if state.z is not None:
        z = sample_categorical(class_activation_probs(h, params), rng)
    return LayerState(v=v, h=h, z=z)


@dataclass
class CdStatistics:
    """Batch expectations entering the CD-k update."""

    vh: np.ndarray  # (V, H)
    hz: np.ndarray  # (H, Z)
    v: np.ndarray  # (V,)
    h: np.ndarray  # (H,)
    z: np.ndarray  # (Z,)


def _scaled_mean(x: np.ndarray, w: np.ndarray | None) -> np.ndarray:
    # weights scale each row's contribution; the divisor stays the row count
    if w is None:
        return x.mean(axis=0)
    return (w[:, None] * x).sum(axis=0) / x.shape[0]


def _statistics(
    v: np.ndarray,
    ph: np.ndarray,
    z: np.ndarray,
    labeled: np.ndarray,
    weights: np.ndarray | None,
) -> CdStatistics:
    n = v.shape[0]
    vw = v if weights is None else v * weights[:, None]
    vh = vw.T @ ph / n
    vmean = _scaled_mean(v, weights)
    hmean = _scaled_mean(ph, weights)
    Z = z.shape[1]
    if labeled.any():
        zl, hl = z[labeled], ph[labeled]
        wl = None if weights is None else weights[labeled]
        hw = hl if wl is None else hl * wl[:, None]
        hz = hw.T @ zl / zl.shape[0]
        zmean = _scaled_mean(zl, wl)
    else:
        hz = np.zeros((ph.shape[1], Z))
        zmean = np.zeros(Z)
    return CdStatistics(vh=vh, hz=hz, v=vmean, h=hmean, z=zmean)


def apply_cd_update(
    params: RbmParams,
    data: CdStatistics,
    recon: CdStatistics,
    eta: float,
    update_class: bool = True,
) -> RbmParams:
    """theta <- theta - eta * (E_recon - E_data) for every parameter group."""
    W = params.W - eta * (recon.vh - data.vh)
    a = params.a - eta * (recon.v - data.v)
    b = params.b - eta * (recon.h - data.h)
    if update_class:
        U = params.U - eta * (recon.hz - data.hz)
        c = params.c - eta * (recon.z - data.z)
    else:
        U, c = params.U.copy(), params.c.copy()
    return RbmParams(W, U, a, b, c)


def _as_batch(v: np.ndarray, z: np.ndarray | None, params: RbmParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    v = np.atleast_2d(_check_last_dim(v, params.V, "v"))
    if v.shape[0] == 0:
        raise ValueError("empty mini-batch")
    if z is None:
        z = np.zeros((v.shape[0], params.Z))
    z = np.atleast_2d(_check_last_dim(z, params.Z, "z"))
    if z.shape[0] != v.shape[0]:
        raise ShapeError("v and z hold different numbers of instances")
    labeled = z.sum(axis=1) > 0
    return v, z, labeled


def cd_statistics(
    v: np.ndarray,
    z: np.ndarray | None,
    params: RbmParams,
    k: int,
    rng: np.random.Generator,
    instance_weights: np.ndarray | None = None,
) -> tuple[CdStatistics, CdStatistics]:
    """Data-phase and reconstruction-phase statistics for a CD-k update.

    Rows of ``z`` that are all zero mark unlabeled instances: their class term is
    dropped from the hidden activations and they do not enter the class
    statistics.  The data phase uses hidden probabilities; intermediate Gibbs
    sweeps use binary samples; the last sweep is mean-field.
    ``instance_weights`` scale each instance's contribution to both phases, so
    a weight below one shrinks that instance's share of the gradient and
    all-ones weights reproduce the unweighted statistics exactly.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    v0, z0, labeled = _as_batch(v, z, params)
    zmask = labeled[:, None].astype(float)
    ph0 = hidden_activation_probs(v0, z0, params)
    data = _statistics(v0, ph0, z0, labeled, instance_weights)

    h = sample_bernoulli(ph0, rng)
    for step in range(k):
        pv = visible_activation_probs(h, params)
        pz = class_activation_probs(h, params) * zmask
        if step < k - 1:
            vk = sample_bernoulli(pv, rng)
            zk = sample_categorical(pz + (1.0 - zmask) / params.Z, rng) * zmask
            h = sample_bernoulli(hidden_activation_probs(vk, zk, params), rng)
        else:
            vk, zk = pv, pz
    phk = hidden_activation_probs(vk, zk, params)
    recon = _statistics(vk, phk, zk, labeled, instance_weights)
    return data, recon


def cd_k_update(
    v: np.ndarray,
    z: np.ndarray | None,
    params: RbmParams,
    k: int,
    eta: float,
    rng: np.random.Generator,
) -> RbmParams:
    """One CD-k mini-batch step; returns new parameters, ``params`` is untouched."""
    if eta < 0:
        raise ValueError("learning rate must be non-negative")
    data, recon = cd_statistics(v, z, params, k, rng)
    return apply_cd_update(params, data, recon, eta)


def reconstruct(v: np.ndarray, z: np.ndarray | None, params: RbmParams) -> tuple[np.ndarray, np.ndarray]:
    """Mean-field round trip: h = P(h | v, z), then (P(v | h), P(z | h))."""
    ph = hidden_activation_probs(v, z, params)
    return visible_activation_probs(ph, params), class_activation_probs(ph, params)


def save_params(params: RbmParams, path: str | Path) -> None:
    """Plain-text dump: a ``V H Z`` header line, then each group row-major."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{params.V} {params.H} {params.Z}\n")
        for name in ("W", "U", "a", "b", "c"):
            arr = getattr(params, name)
            fh.write(name + " " + " ".join(repr(float(x)) for x in arr.ravel()) + "\n")


def load_params(path: str | Path) -> RbmParams:
    with open(path, encoding="utf-8") as fh:
        V, H, Z = (int(x) for x in fh.readline().split())
        shapes = {"W": (V, H), "U": (H, Z), "a": (V,), "b": (H,), "c": (Z,)}
        groups = {}
        for line in fh:
            name, *vals = line.split()
            groups[name] = np.array([float(x) for x in vals]).reshape(shapes[name])
    return RbmParams(**groups)
