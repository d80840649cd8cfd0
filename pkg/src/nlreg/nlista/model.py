"""Unrolled shrinkage network: forward recurrence and exact reverse-mode
gradients, written directly in numpy.

Layer t maps x to eta(x + beta_t * W_t^T (gamma * v), theta_t) where
v = f'(Ax) * (y - f(Ax)) and gamma clips v to unit l2 norm when it is large.
Two differentiation conventions are fixed here: gamma is a stop-gradient
(it is not trainable; ``differentiate_gamma=True`` enables the full path for
ablations), and the soft threshold uses subgradient 0 at its kinks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..core import soft_threshold
from ..funcs import get_function

_MAGIC = b"NLCK"
_VERSION = 1


@dataclass
class NlistaLayerParams:
    """Per-layer trainable parameters; theta stays >= 0 (clamped after steps)."""

    W: np.ndarray   # (m, n)
    beta: float
    theta: float


@dataclass
class NlistaModel:
    """Layer stack plus the dictionary it was built for.

    ``f_id`` names the nonlinearity used inside the update; the linear-LISTA
    baseline is this same model with f_id="identity" while the data keep the
    true nonlinearity (a documented approximation).
    """

    layers: list
    f_id: str
    A: np.ndarray
    train_log: list = field(default_factory=list)   # (step, stage, lr, val_loss)

    @property
    def T(self) -> int:
        return len(self.layers)

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    def snapshot(self, n_layers: Optional[int] = None):
        k = self.T if n_layers is None else n_layers
        return [(lay.W.copy(), lay.beta, lay.theta) for lay in self.layers[:k]]

    def restore(self, snap) -> None:
        for lay, (W, beta, theta) in zip(self.layers, snap):
            lay.W[...] = W
            lay.beta = beta
            lay.theta = theta


def new_layer(model: NlistaModel, init_beta: float, init_theta: float) -> NlistaLayerParams:
    """Append one layer: a copy of the last layer's learned values, or the
    W=A / beta / theta initialization for the first layer."""
    if model.layers:
        prev = model.layers[-1]
        lay = NlistaLayerParams(prev.W.copy(), prev.beta, prev.theta)
    else:
        lay = NlistaLayerParams(model.A.copy(), init_beta, init_theta)
    model.layers.append(lay)
    return lay


def gamma_clip(v):
    """Residual-product clip: scale = 1 if ||v|| <= 1 else 1/||v||.

    Returns (scale, scaled) with ||scaled|| <= 1 always.
    """
    v = np.asarray(v, dtype=float)
    nv = float(np.linalg.norm(v))
    if nv <= 1.0:
        return 1.0, v.copy()
    return 1.0 / nv, v / nv


@dataclass
class ForwardTape:
    """Per-layer intermediates recorded for backward.

    us/rs/vs hold A x, y - f(Ax) and f'(Ax)*(y - f(Ax)); gammas the per-sample
    clip scales; zs the pre-threshold activations (active masks are |z| >
    theta); ds the update directions W^T (gamma*v); xs the layer outputs
    x^(0..T).
    """

    us: list = field(default_factory=list)
    rs: list = field(default_factory=list)
    vs: list = field(default_factory=list)
    gammas: list = field(default_factory=list)
    zs: list = field(default_factory=list)
    ds: list = field(default_factory=list)
    xs: list = field(default_factory=list)


def _gamma_batch(V: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.sum(V * V, axis=0))
    return np.where(norms <= 1.0, 1.0, 1.0 / np.where(norms > 1.0, norms, 1.0))


def forward_batch(model: NlistaModel, Y: np.ndarray, record: bool = False,
                  n_layers: Optional[int] = None,
                  gamma_override: Optional[list] = None,
                  keep_layer_outputs: bool = False):
    """Run the recurrence on a (m, B) batch of measurements.

    Returns (X, tape); tape is None unless ``record`` (full intermediates) or
    ``keep_layer_outputs`` (xs only, for per-layer evaluation). Passing
    ``gamma_override`` pins the per-layer clip scales, which realizes the
    stop-gradient reading of gamma as an actual function of the parameters.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] != model.m:
        raise ValueError(f"Y must have shape ({model.m}, B), got {Y.shape}")
    T_use = model.T if n_layers is None else n_layers
    if not 0 <= T_use <= model.T:
        raise ValueError(f"n_layers must lie in [0, {model.T}]")
    f = get_function(model.f_id)
    X = np.zeros((model.n, Y.shape[1]))
    tape = ForwardTape() if (record or keep_layer_outputs) else None
    if tape is not None:
        tape.xs.append(X.copy())
    for t in range(T_use):
        lay = model.layers[t]
        U = model.A @ X
        R = Y - f.value(U)
        V = f.derivative(U) * R
        if gamma_override is not None:
            gam = np.asarray(gamma_override[t], dtype=float)
        else:
            gam = _gamma_batch(V)
        D = lay.W.T @ (V * gam[None, :])
        Z = X + lay.beta * D
        X = soft_threshold(Z, lay.theta)
        if record:
            tape.us.append(U)
            tape.rs.append(R)
            tape.vs.append(V)
            tape.gammas.append(gam)
            tape.zs.append(Z)
            tape.ds.append(D)
        if tape is not None:
            tape.xs.append(X.copy())
    return X, tape


def forward(model: NlistaModel, y, record: bool = False,
            n_layers: Optional[int] = None):
    """Single-sample forward pass; batching is pure vectorization."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        raise ValueError("y must be a vector; use forward_batch for batches")
    X, tape = forward_batch(model, y[:, None], record=record, n_layers=n_layers)
    return X[:, 0], tape


@dataclass
class LayerGrads:
    W: np.ndarray
    beta: float
    theta: float


def backward(model: NlistaModel, tape: ForwardTape, grad_out: np.ndarray,
             frozen_prefix: int = 0, differentiate_gamma: bool = False):
    """Reverse-mode gradients of a scalar loss wrt every layer's parameters.

    ``grad_out`` is d(loss)/d(x_out) with the shape of the recorded output
    ((n, B) or (n,)). Frozen-prefix layers still propagate activations but
    produce zero parameter gradients. The threshold derivative conventions:
    d eta/d z = 1{|z| > theta}, d eta/d theta = -sign(eta) on the active set,
    0 at the kink.
    """
    if tape is None or not tape.zs:
        raise ValueError("backward requires a tape recorded with record=True")
    f = get_function(model.f_id)
    G = np.asarray(grad_out, dtype=float)
    squeeze = G.ndim == 1
    if squeeze:
        G = G[:, None]
    L = len(tape.zs)
    grads: list = [None] * L
    for t in reversed(range(L)):
        lay = model.layers[t]
        Z = tape.zs[t]
        mask = np.abs(Z) > lay.theta
        Gz = G * mask
        gam = tape.gammas[t]
        Vt = tape.vs[t] * gam[None, :]
        if t >= frozen_prefix:
            g_theta = -float(np.sum(Gz * np.sign(Z)))
            g_beta = float(np.sum(Gz * tape.ds[t]))
            g_W = lay.beta * (Vt @ Gz.T)
            grads[t] = LayerGrads(g_W, g_beta, g_theta)
        else:
            grads[t] = LayerGrads(np.zeros_like(lay.W), 0.0, 0.0)
        if t == 0:
            break
        Gvt = lay.beta * (lay.W @ Gz)
        if differentiate_gamma:
            # through v/||v|| for clipped samples: J = (I - vt vt^T)/||v||
            clipped = gam < 1.0
            proj = np.sum(Vt * Gvt, axis=0)
            Gv = gam[None, :] * (Gvt - (clipped * proj)[None, :] * Vt)
        else:
            Gv = gam[None, :] * Gvt
        U = tape.us[t]
        Gu = Gv * (f.second_derivative(U) * tape.rs[t] - f.derivative(U) ** 2)
        G = Gz + model.A.T @ Gu
    return grads


def save_checkpoint(model: NlistaModel, path, meta: Optional[dict] = None) -> None:
    """Versioned binary container (+ JSON sidecar): layer count, dictionary,
    then per layer W / beta / theta as little-endian float64, column-major."""
    path = Path(path)
    m, n = model.A.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<QQQ", model.T, m, n))
        fh.write(np.asarray(model.A, dtype="<f8").tobytes(order="F"))
        for lay in model.layers:
            fh.write(np.asarray(lay.W, dtype="<f8").tobytes(order="F"))
            fh.write(struct.pack("<dd", lay.beta, lay.theta))
    sidecar = {
        "format": "NLCK v1: magic, u32 version, u64 T/m/n, A, then per layer "
                  "W (f64 LE column-major), beta, theta",
        "f_id": model.f_id, "T": model.T, "m": m, "n": n,
        "train_log": [list(rec) for rec in model.train_log],
    }
    if meta:
        sidecar.update(meta)
    with open(path.with_suffix(path.suffix + ".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> NlistaModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not an NLCK checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        T, m, n = struct.unpack("<QQQ", fh.read(24))

        def read_mat():
            buf = fh.read(m * n * 8)
            return np.frombuffer(buf, dtype="<f8").reshape((m, n), order="F").copy()

        A = read_mat()
        layers = []
        for _ in range(T):
            W = read_mat()
            beta, theta = struct.unpack("<dd", fh.read(16))
            layers.append(NlistaLayerParams(W, beta, theta))
    sidecar_path = path.with_suffix(path.suffix + ".json")
    f_id = "identity"
    train_log: list = []
    if sidecar_path.exists():
        with open(sidecar_path) as fh:
            meta = json.load(fh)
        f_id = meta.get("f_id", f_id)
        train_log = [tuple(rec) for rec in meta.get("train_log", [])]
    return NlistaModel(layers=layers, f_id=f_id, A=A, train_log=train_log)
