"""Small reverse-mode differentiation engine for the unrolled reconstruction network.

Each :class:`Var` holds a numpy value, its parents and a vector-Jacobian
product. Complex values carry cotangents as ``dL/dRe + 1j * dL/dIm``, so a
complex-linear map ``A`` pulls a cotangent back through ``A^H``.

The network is ``x_{n+1} = DC(y, CNN_theta(x_n))`` started from the zero-filled
adjoint, where ``DC`` is :func:`kband.operators.dc_solve` and ``CNN_theta`` is a
stack of 3x3 convolutions acting on (real, imaginary) channels.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import _backend
from .errors import CorruptRecord, InvalidArgument, UnsupportedVersion
from .operators import DCConfig, adjoint_op, dc_solve, fft2c, ifft2c


class Var:
    __slots__ = ("value", "parents", "vjp", "grad")

    def __init__(self, value, parents=(), vjp=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.grad = None

    def __repr__(self):
        v = np.asarray(self.value)
        return f"Var(shape={v.shape}, dtype={v.dtype})"


def constant(value) -> Var:
    return Var(np.asarray(value))


def _topo(root: Var) -> list[Var]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Var, wrt: Var, seed=None) -> np.ndarray:
    """Gradient of the scalar ``loss`` with respect to the leaf ``wrt``.

    With ``seed`` given, ``loss`` may be any node and the result is the
    vector-Jacobian product with that cotangent. A graph in which ``loss``
    does not depend on ``wrt`` yields zeros.
    """
    order = _topo(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(np.asarray(loss.value, dtype=float)) if seed is None else np.asarray(seed)
    for node in reversed(order):
        if node.grad is None or node.vjp is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
    if wrt.grad is None:
        return np.zeros_like(np.asarray(wrt.value))
    return np.asarray(wrt.grad)


# ---------------------------------------------------------------------------
# node types

def add(a: Var, b: Var) -> Var:
    return Var(a.value + b.value, (a, b), lambda g: (g, g))


def scale(a: Var, c: float) -> Var:
    return Var(c * a.value, (a,), lambda g: (c * g,))


def take(theta: Var, offset: int, shape) -> Var:
    size = int(np.prod(shape))
    n = theta.value.shape[0]

    def vjp(g):
        out = np.zeros(n, dtype=theta.value.dtype)
        out[offset:offset + size] = np.ravel(g)
        return (out,)

    return Var(theta.value[offset:offset + size].reshape(shape), (theta,), vjp)


def to_channels(x: Var) -> Var:
    v = x.value
    return Var(np.stack([v.real, v.imag]), (x,), lambda g: (g[0] + 1j * g[1],))


def from_channels(c: Var) -> Var:
    v = c.value
    if v.shape[0] != 2:
        raise InvalidArgument(f"expected 2 output channels, got {v.shape[0]}")
    return Var(v[0] + 1j * v[1], (c,), lambda g: (np.stack([g.real, g.imag]).astype(v.dtype),))


def conv3x3(x: Var, w: Var, b: Var) -> Var:
    """Same-padded 3x3 cross-correlation ``(cin, h, w) -> (cout, h, w)``."""
    xv, wv = x.value, w.value
    if wv.shape[1] != xv.shape[0] or wv.shape[2:] != (3, 3):
        raise InvalidArgument(f"kernel {wv.shape} does not match input channels {xv.shape[0]}")
    out = _backend.conv3x3_forward(xv, wv.astype(xv.dtype), b.value.astype(xv.dtype))

    def vjp(g):
        return _backend.conv3x3_backward(xv, wv.astype(xv.dtype), np.asarray(g, dtype=xv.dtype))

    return Var(out, (x, w, b), vjp)


def relu(x: Var) -> Var:
    on = x.value > 0
    return Var(np.where(on, x.value, 0), (x,), lambda g: (g * on,))


ACTIVATIONS = {"relu": relu, "linear": lambda x: x}


def fft2c_node(x: Var) -> Var:
    return Var(fft2c(x.value), (x,), lambda g: (ifft2c(g),))


def dc_node(z: Var, y, mask, cfg: DCConfig, maps=None) -> Var:
    """Data-consistency solve as a graph node; ``y`` and ``mask`` are constants.

    The cotangent pulls back through ``eta (A^H A + eta I)^{-1}``, which is
    the same solve applied with zero data.
    """
    y = np.asarray(y)
    dt = z.value.dtype
    out = dc_solve(y, z.value, mask, cfg, maps).astype(dt, copy=False)
    zero = np.zeros_like(y)
    return Var(out, (z,), lambda g: (dc_solve(zero, g, mask, cfg, maps).astype(dt, copy=False),))


def kspace_loss(pred_kspace: Var, target, mask, weight=None, kind: str = "l1") -> Var:
    """``sum_j w_j * l(mask_j * (pred_j - target_j))`` with ``l = |.|`` or ``|.|^2``.

    Pixels outside ``mask`` contribute exactly zero; ``sign(0) = 0`` for l1.
    """
    mask = np.asarray(mask)
    on = mask != 0
    r = np.where(on, pred_kspace.value - np.where(on, target, 0), 0)
    w = np.ones(mask.shape) if weight is None else np.asarray(weight)
    w = np.where(on, w, 0.0)
    if kind == "l1":
        mag = np.abs(r)
        value = np.sum(w * mag)
        unit = np.divide(r, mag, out=np.zeros_like(r), where=mag > 0)
        dvalue = w * unit
    elif kind == "l2":
        value = np.sum(w * (r.real ** 2 + r.imag ** 2))
        dvalue = 2.0 * w * r
    else:
        raise InvalidArgument(f"unknown loss kind {kind!r}")
    return Var(np.asarray(value), (pred_kspace,), lambda g: (g * dvalue,))


# ---------------------------------------------------------------------------
# model description

@dataclass(frozen=True)
class Architecture:
    n_layers: int = 3
    channels: int = 8
    kernel: int = 3
    activation: str = "relu"
    residual: bool = True
    n_blocks: int = 1

    def __post_init__(self):
        if self.n_layers < 1 or self.channels < 1 or self.n_blocks < 1:
            raise InvalidArgument("n_layers, channels and n_blocks must be positive")
        if self.kernel != 3:
            raise InvalidArgument("only 3x3 kernels are supported")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgument(f"unknown activation {self.activation!r}")

    @property
    def layers(self) -> list[tuple[int, int]]:
        """``(cout, cin)`` of every convolution."""
        dims = [2] + [self.channels] * (self.n_layers - 1) + [2]
        return [(dims[i + 1], dims[i]) for i in range(self.n_layers)]

    @property
    def block_size(self) -> int:
        return sum(co * ci * 9 + co for co, ci in self.layers)

    @property
    def n_values(self) -> int:
        return self.block_size * self.n_blocks


@dataclass(frozen=True)
class ModelParams:
    arch: Architecture
    values: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if self.values.ndim != 1 or self.values.shape[0] != self.arch.n_values:
            raise InvalidArgument(f"parameter vector has {self.values.shape} entries, arch needs {self.arch.n_values}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgument("parameters must be finite")

    def replace(self, values) -> "ModelParams":
        return ModelParams(self.arch, np.asarray(values), self.seed)

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.values, dtype="<f8").tobytes()).hexdigest()


@dataclass(frozen=True)
class UnrollConfig:
    n_unrolls: int = 2
    eta: float = 1.0
    weight_sharing: bool = True

    def __post_init__(self):
        if self.n_unrolls < 1:
            raise InvalidArgument("n_unrolls must be >= 1")
        if not self.eta > 0:
            raise InvalidArgument("eta must be positive")


def init_params(arch: Architecture, seed: int = 0, dtype=np.float64, output_scale: float = 1.0) -> ModelParams:
    """He-uniform kernels (variance ``2 / fan_in``) and zero biases.

    ``output_scale`` shrinks the last convolution of every block, so a
    residual network starts close to the identity; 0 makes it exactly the
    identity and the unrolled model starts at the zero-filled solution.
    """
    rng = np.random.default_rng(seed)
    parts = []
    last = len(arch.layers) - 1
    for _ in range(arch.n_blocks):
        for i, (co, ci) in enumerate(arch.layers):
            bound = np.sqrt(6.0 / (ci * 9)) * (output_scale if i == last else 1.0)
            parts.append(rng.uniform(-bound, bound, size=co * ci * 9))
            parts.append(np.zeros(co))
    return ModelParams(arch, np.concatenate(parts).astype(dtype), int(seed))


def zero_params(arch: Architecture, dtype=np.float64) -> ModelParams:
    return ModelParams(arch, np.zeros(arch.n_values, dtype=dtype))


def kernel_mask(arch: Architecture) -> np.ndarray:
    """Boolean selector of kernel (non-bias) entries in the flat vector."""
    sel = []
    for _ in range(arch.n_blocks):
        for co, ci in arch.layers:
            sel.append(np.ones(co * ci * 9, dtype=bool))
            sel.append(np.zeros(co, dtype=bool))
    return np.concatenate(sel)


# ---------------------------------------------------------------------------
# graph builders

def cnn_node(theta: Var, arch: Architecture, x: Var, block: int = 0) -> Var:
    act = ACTIVATIONS[arch.activation]
    off = block * arch.block_size
    h = to_channels(x)
    layers = arch.layers
    for i, (co, ci) in enumerate(layers):
        w = take(theta, off, (co, ci, 3, 3))
        off += co * ci * 9
        b = take(theta, off, (co,))
        off += co
        h = conv3x3(h, w, b)
        if i < len(layers) - 1:
            h = act(h)
    out = from_channels(h)
    return add(x, out) if arch.residual else out


def _block_for(arch: Architecture, cfg: UnrollConfig, n: int) -> int:
    if cfg.weight_sharing:
        if arch.n_blocks != 1:
            raise InvalidArgument("weight sharing needs a single parameter block")
        return 0
    if arch.n_blocks != cfg.n_unrolls:
        raise InvalidArgument(f"unshared unrolls need {cfg.n_unrolls} parameter blocks, arch has {arch.n_blocks}")
    return n


def unrolled_node(theta: Var, arch: Architecture, y, mask, cfg: UnrollConfig, maps=None) -> Var:
    dc = DCConfig(eta=cfg.eta)
    y = np.where(np.asarray(mask) != 0, y, 0)
    x = constant(adjoint_op(y, mask, maps).astype(np.result_type(y.dtype, np.complex64), copy=False))
    for n in range(cfg.n_unrolls):
        z = cnn_node(theta, arch, x, _block_for(arch, cfg, n))
        x = dc_node(z, y, mask, dc, maps)
    return x


def cnn_forward(params: ModelParams, x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise InvalidArgument(f"expected a 2-D complex image, got shape {x.shape}")
    return cnn_node(constant(params.values), params.arch, constant(x)).value


def unrolled_forward(params: ModelParams, y, input_mask, cfg: UnrollConfig, maps=None) -> np.ndarray:
    return unrolled_node(constant(params.values), params.arch, y, input_mask, cfg, maps).value


def value_and_grad(params: ModelParams, build: Callable[[Var], Var]) -> tuple[float, np.ndarray]:
    """Evaluate ``build(theta)`` (a scalar node) and its gradient in one pass."""
    theta = constant(params.values)
    loss = build(theta)
    g = backward(loss, theta)
    return float(np.real(loss.value)), g


def finite_diff_grad(params: ModelParams, loss_fn: Callable[[np.ndarray], float], step: float = 1e-5) -> np.ndarray:
    """Central differences ``(L(t + h e_k) - L(t - h e_k)) / 2h`` for every coordinate."""
    if not step > 0:
        raise InvalidArgument(f"finite-difference step must be positive, got {step}")
    theta = np.array(params.values, dtype=np.float64)
    grad = np.empty_like(theta)
    for k in range(theta.size):
        old = theta[k]
        theta[k] = old + step
        up = loss_fn(theta.copy())
        theta[k] = old - step
        down = loss_fn(theta.copy())
        theta[k] = old
        grad[k] = (up - down) / (2 * step)
    return grad


# ---------------------------------------------------------------------------
# checkpoints: <stem>.json descriptor + <stem>.bin little-endian float64 block

CHECKPOINT_VERSION = "KBND-CKPT-1"


def save_checkpoint(params: ModelParams, path) -> Path:
    path = Path(path)
    stem = path.with_suffix("")
    blob = np.ascontiguousarray(params.values, dtype="<f8").tobytes()
    desc = {
        "version": CHECKPOINT_VERSION,
        "arch": asdict(params.arch),
        "seed": params.seed,
        "n_values": int(params.values.size),
        "dtype": "<f8",
        "sha256": hashlib.sha256(blob).hexdigest(),
        "params_file": stem.name + ".bin",
    }
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".bin").write_bytes(blob)
    stem.with_suffix(".json").write_text(json.dumps(desc, indent=2))
    return stem.with_suffix(".json")


def load_checkpoint(path) -> ModelParams:
    stem = Path(path).with_suffix("")
    desc = json.loads(stem.with_suffix(".json").read_text())
    if desc.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedVersion(f"unsupported checkpoint version {desc.get('version')!r}")
    blob = (stem.parent / desc["params_file"]).read_bytes()
    if len(blob) != 8 * desc["n_values"] or hashlib.sha256(blob).hexdigest() != desc["sha256"]:
        raise CorruptRecord(f"checkpoint {stem} failed its checksum")
    values = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    return ModelParams(Architecture(**desc["arch"]), values, desc.get("seed", 0))
