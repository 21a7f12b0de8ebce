"""Tape-based reverse-mode differentiation over the fixed primitive set the model needs.

The op set is closed on purpose: conv1d (optionally with a fixed binary kernel
mask), affine, relu, channel_norm, add, sum_all, absolute, l1, and the
Gumbel-softmax vector-quantization op. Each op validates shapes, checks the
output for non-finite values, and records a backward closure on the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

NORM_EPS = 1e-5


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    """Operand shapes or dtypes are incompatible."""


class NonFiniteError(AutodiffError):
    """An op produced NaN or inf."""


class NonScalarRootError(AutodiffError):
    """backward() called on a tensor that is not a scalar."""


class Tensor:
    """Array plus an optional parameter name; identity keys the tape."""

    __slots__ = ("data", "name")

    def __init__(self, data: np.ndarray, name: Optional[str] = None):
        self.data = np.asarray(data)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


class TapeNode:
    __slots__ = ("op", "out", "inputs", "backward_fn")

    def __init__(self, op: str, out: Tensor, inputs: tuple,
                 backward_fn: Callable[[np.ndarray], list]):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Execution-ordered record of primitive applications."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def add(self, node: TapeNode):
        self.nodes.append(node)

    def __len__(self):
        return len(self.nodes)


def _check_out(op: str, out: np.ndarray) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


def _record(tape: Optional[Tape], op: str, out_data: np.ndarray, inputs: tuple,
            backward_fn) -> Tensor:
    out = Tensor(_check_out(op, out_data))
    if tape is not None:
        tape.add(TapeNode(op, out, inputs, backward_fn))
    return out


def _same_dtype(op: str, *tensors: Tensor):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"{op}: mixed dtypes {dt} vs {t.dtype}")


def conv1d(x: Tensor, w: Tensor, b: Tensor, mask: Optional[np.ndarray] = None,
           tape: Optional[Tape] = None) -> Tensor:
    """1-D convolution along time with zero 'same' padding.

    x: (T, c_in), w: (k, c_in, c_out) with k odd, b: (c_out,).
    mask: optional (k,) binary vector; masked taps contribute exactly zero to
    the output and their weight gradients are identically zero.
    """
    _same_dtype("conv1d", x, w, b)
    if x.data.ndim != 2 or w.data.ndim != 3 or b.data.ndim != 1:
        raise ShapeError("conv1d: expected x (T,c_in), w (k,c_in,c_out), b (c_out,)")
    k, c_in, c_out = w.shape
    if k % 2 == 0:
        raise ShapeError("conv1d: kernel size must be odd")
    if x.shape[1] != c_in or b.shape[0] != c_out:
        raise ShapeError(f"conv1d: shape mismatch x{x.shape} w{w.shape} b{b.shape}")
    if mask is not None and mask.shape != (k,):
        raise ShapeError("conv1d: mask must have shape (k,)")
    T = x.shape[0]
    p = (k - 1) // 2
    xp = np.zeros((T + 2 * p, c_in), dtype=x.dtype)
    xp[p:p + T] = x.data
    taps = range(k) if mask is None else [i for i in range(k) if mask[i] != 0]
    out = np.broadcast_to(b.data, (T, c_out)).copy()
    for i in taps:
        out += xp[i:i + T] @ w.data[i]

    def backward_fn(g: np.ndarray):
        dw = np.zeros_like(w.data)
        for i in taps:
            dw[i] = xp[i:i + T].T @ g
        db = g.sum(axis=0)
        dxp = np.zeros_like(xp)
        for i in taps:
            dxp[i:i + T] += g @ w.data[i].T
        return [(x, dxp[p:p + T]), (w, dw), (b, db)]

    return _record(tape, "conv1d", out, (x, w, b), backward_fn)


def affine(x: Tensor, w: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """x (T, n_in) @ w (n_in, n_out) + b."""
    _same_dtype("affine", x, w, b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] \
            or b.shape != (w.shape[1],):
        raise ShapeError(f"affine: shape mismatch x{x.shape} w{w.shape} b{b.shape}")
    out = x.data @ w.data + b.data

    def backward_fn(g: np.ndarray):
        return [(x, g @ w.data.T), (w, x.data.T @ g), (b, g.sum(axis=0))]

    return _record(tape, "affine", out, (x, w, b), backward_fn)


def relu(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward_fn(g: np.ndarray):
        return [(x, g * (x.data > 0))]

    return _record(tape, "relu", out, (x,), backward_fn)


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor,
                 tape: Optional[Tape] = None) -> Tensor:
    """Per-frame normalization over the channel axis with learned scale/shift.

    Statistics are taken over channels only; no information crosses time.
    """
    _same_dtype("channel_norm", x, gamma, beta)
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("channel_norm: expected x (T,d), gamma/beta (d,)")
    d = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(NORM_EPS, dtype=x.dtype))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward_fn(g: np.ndarray):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return [(x, dx), (gamma, dgamma), (beta, dbeta)]

    return _record(tape, "channel_norm", out, (x, gamma, beta), backward_fn)


def add(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    _same_dtype("add", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward_fn(g: np.ndarray):
        return [(a, g), (b, g)]

    return _record(tape, "add", out, (a, b), backward_fn)


def sum_all(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward_fn(g: np.ndarray):
        return [(x, np.full_like(x.data, g))]

    return _record(tape, "sum_all", out, (x,), backward_fn)


def absolute(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Elementwise |x|; subgradient at 0 is 0."""
    out = np.abs(x.data)

    def backward_fn(g: np.ndarray):
        return [(x, g * np.sign(x.data))]

    return _record(tape, "absolute", out, (x,), backward_fn)


def l1(y: Tensor, x: Tensor, valid: Optional[np.ndarray] = None,
       tape: Optional[Tape] = None) -> Tensor:
    """Sum of |y - x| over frames and feature dims; optional per-frame validity.

    valid: (T,) 0/1 weights; invalid rows contribute nothing to value or grad.
    """
    _same_dtype("l1", y, x)
    if y.shape != x.shape:
        raise ShapeError(f"l1: shape mismatch {y.shape} vs {x.shape}")
    diff = y.data - x.data
    if valid is not None:
        if valid.shape != (y.shape[0],):
            raise ShapeError("l1: valid must have shape (T,)")
        diff = diff * valid[:, None].astype(y.dtype)
        # row-sum then dot keeps the reduction tree of real rows independent of
        # how much zero padding follows them
        out = np.asarray(np.abs(diff).sum(axis=1) @ valid.astype(y.dtype), dtype=y.dtype)
    else:
        out = np.asarray(np.abs(diff).sum(), dtype=y.dtype)

    def backward_fn(g: np.ndarray):
        d = np.sign(diff) * g
        return [(y, d), (x, -d)]

    return _record(tape, "l1", out, (y, x), backward_fn)


def sample_gumbel(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    u = rng.random(shape)
    return (-np.log(-np.log(np.clip(u, 1e-20, 1.0 - 1e-16)))).astype(dtype)


def gumbel_vq(logits: Tensor, codebook: Tensor, noise: Optional[np.ndarray],
              tau: float, hard: bool = True, tape: Optional[Tape] = None):
    """Group-wise Gumbel-softmax codeword selection.

    logits: (T, groups*codewords); codebook: (groups, codewords, d/groups).
    Hard mode outputs the argmax codeword per group (ties to the lowest index)
    and routes gradients through the soft path (straight-through); soft mode
    outputs the probability-weighted codeword mixture.

    Returns (quantized (T, d) Tensor, indices (T, groups), soft (T, groups, codewords)).
    """
    _same_dtype("gumbel_vq", logits, codebook)
    if tau <= 0:
        raise ValueError("gumbel_vq: temperature must be > 0")
    groups, codewords, dpg = codebook.shape
    T = logits.shape[0]
    if logits.shape != (T, groups * codewords):
        raise ShapeError(f"gumbel_vq: logits {logits.shape} incompatible with "
                         f"codebook {codebook.shape}")
    y = logits.data.reshape(T, groups, codewords)
    if noise is not None:
        if noise.shape != y.shape:
            raise ShapeError("gumbel_vq: noise shape mismatch")
        y = y + noise
    y = y / np.asarray(tau, dtype=logits.dtype)
    y = y - y.max(axis=2, keepdims=True)
    soft = np.exp(y)
    soft /= soft.sum(axis=2, keepdims=True)
    indices = np.argmax(soft, axis=2)
    if hard:
        # (T, groups, dpg): selected codeword per group
        sel = codebook.data[np.arange(groups)[None, :], indices]
        out = sel.reshape(T, groups * dpg)
    else:
        out = np.einsum("tgv,gvd->tgd", soft, codebook.data).reshape(T, groups * dpg)

    def backward_fn(g: np.ndarray):
        gt = g.reshape(T, groups, dpg)
        if hard:
            onehot = np.zeros_like(soft)
            np.put_along_axis(onehot, indices[..., None], 1.0, axis=2)
            dcb = np.einsum("tgv,tgd->gvd", onehot, gt)
        else:
            dcb = np.einsum("tgv,tgd->gvd", soft, gt)
        dsoft = np.einsum("tgd,gvd->tgv", gt, codebook.data)
        dy = soft * (dsoft - (dsoft * soft).sum(axis=2, keepdims=True))
        dlogits = (dy / tau).reshape(T, groups * codewords).astype(logits.dtype)
        return [(logits, dlogits), (codebook, dcb.astype(codebook.dtype))]

    out_t = _record(tape, "gumbel_vq", out, (logits, codebook), backward_fn)
    return out_t, indices, soft


def backward(tape: Tape, root: Tensor, seed: float = 1.0) -> dict[int, np.ndarray]:
    """Walk the tape in reverse; returns gradients keyed by id(tensor).

    The root must be scalar. Parameters not reachable from the root simply have
    no entry; callers map missing entries to zeros.
    """
    if root.data.size != 1:
        raise NonScalarRootError(f"root has shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=root.dtype)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        for tensor, gin in node.backward_fn(g):
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + gin
            else:
                grads[key] = gin
    return grads


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators, keyed by parameter name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> None:
    """One Adam update in place; missing grads are treated as zero."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param {p.data.shape} ({name})")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)


def grad_check(forward: Callable[[Optional[Tape]], Tensor],
               params: dict[str, Tensor], h: float = 1e-5,
               noise_floor: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    forward(tape) must rebuild the scalar loss from the current parameter
    values; all stochastic inputs must be frozen by the caller. Parameters
    should be float64. Components where both gradients sit below noise_floor
    count as agreement: central differences bottom out at roundoff ~eps*|f|/h,
    so exact-zero gradients would otherwise be compared against pure noise.
    """
    tape = Tape()
    loss = forward(tape)
    grads = backward(tape, loss)
    max_rel = 0.0
    for name, p in params.items():
        analytic = grads.get(id(p))
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = np.asarray(analytic).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            f_plus = float(forward(None).data)
            flat[j] = orig - h
            f_minus = float(forward(None).data)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            scale = max(abs(aflat[j]), abs(numeric))
            if scale < noise_floor:
                continue
            rel = abs(aflat[j] - numeric) / max(scale, 1e-12)
            if rel > max_rel:
                max_rel = rel
    return max_rel
