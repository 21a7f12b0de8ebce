"""Forward-only sequence baselines and the inference timing harness.

All baselines run float32 with random fixed-seed parameters (the timing claim
is architectural, independent of training) and share the same BLAS-accumulate
machinery. Convolutions skip masked taps; the GRU evaluates its full step in
the time loop, matching streaming extraction where future inputs are unknown.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg.blas import sgemm

try:
    from threadpoolctl import threadpool_limits
except ImportError:                     # pragma: no cover
    threadpool_limits = None

from .model import plan_masks

KINDS = ("npc", "gru", "bigru", "transformer", "noop")


class BenchError(Exception):
    pass


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    layers: int = 3
    d: int = 512
    heads: int = 8                  # transformer only
    npc_receptive_field: int = 19   # feasible with layers=3, mask 5 -> kernel 13
    npc_mask_size: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BenchError(f"unknown spec kind {self.kind!r}")
        if self.kind == "transformer" and self.d % self.heads != 0:
            raise BenchError("d must be divisible by heads")
        if self.kind == "npc":
            plan_masks(self.layers, self.npc_receptive_field, self.npc_mask_size)


@dataclass(frozen=True)
class BenchRecord:
    kind: str
    T: int
    d: int
    batch: int
    reps: int
    mean_ms: float
    std_ms: float
    per_frame_us: float            # mean time per sequence position (whole batch)
    threads: int

    def __post_init__(self):
        if self.reps < 10:
            raise BenchError("need repetitions >= 10")
        if self.mean_ms <= 0:
            raise BenchError("mean must be > 0")


def _accum(out2d: np.ndarray, a: np.ndarray, w: np.ndarray) -> None:
    """out += a @ w for C-contiguous float32 2-D arrays, no temporaries.

    Runs as column-major out.T = w.T @ a.T with beta=1; the transposed views
    are F-contiguous so BLAS sees them without copying.
    """
    sgemm(1.0, w.T, a.T, beta=1.0, c=out2d.T, overwrite_c=True)


def _uniform(rng, shape, fan_in):
    a = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-a, a, size=shape).astype(np.float32)


def build_params(spec: BaselineSpec, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    d = spec.d
    p: dict[str, np.ndarray] = {}
    if spec.kind in ("gru", "bigru"):
        dirs = ("f", "b") if spec.kind == "bigru" else ("f",)
        for l in range(spec.layers):
            for s in dirs:
                p[f"l{l}.{s}.W"] = _uniform(rng, (d, 3 * d), d)
                p[f"l{l}.{s}.U"] = _uniform(rng, (d, 3 * d), d)
                p[f"l{l}.{s}.bi"] = np.zeros(3 * d, np.float32)
                p[f"l{l}.{s}.bh"] = np.zeros(3 * d, np.float32)
            if spec.kind == "bigru":
                p[f"l{l}.proj"] = _uniform(rng, (2 * d, d), 2 * d)
    elif spec.kind == "transformer":
        for l in range(spec.layers):
            for nm in ("wq", "wk", "wv", "wo"):
                p[f"l{l}.{nm}"] = _uniform(rng, (d, d), d)
            p[f"l{l}.w1"] = _uniform(rng, (d, 4 * d), d)
            p[f"l{l}.b1"] = np.zeros(4 * d, np.float32)
            p[f"l{l}.w2"] = _uniform(rng, (4 * d, d), 4 * d)
            p[f"l{l}.b2"] = np.zeros(d, np.float32)
            for nm in ("ln1", "ln2"):
                p[f"l{l}.{nm}.g"] = np.ones(d, np.float32)
                p[f"l{l}.{nm}.b"] = np.zeros(d, np.float32)
    elif spec.kind == "npc":
        plan = plan_masks(spec.layers, spec.npc_receptive_field, spec.npc_mask_size)
        k = plan.kernel
        for l in range(spec.layers):
            p[f"l{l}.conv"] = _uniform(rng, (3, d, d), 3 * d)
            p[f"l{l}.conv.b"] = np.zeros(d, np.float32)
            w = _uniform(rng, (k, d, d), k * d)
            w *= plan.mask(l + 1)[:, None, None].astype(np.float32)
            p[f"l{l}.masked"] = w
            p[f"l{l}.masked.b"] = np.zeros(d, np.float32)
            for nm in ("cn", "mn"):
                p[f"l{l}.{nm}.g"] = np.ones(d, np.float32)
                p[f"l{l}.{nm}.b"] = np.zeros(d, np.float32)
    return p


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def _gru_direction(xt: np.ndarray, W, U, bi, bh, out: np.ndarray) -> None:
    """One GRU direction over time-major (T, B, d); writes hidden states to out.

    Strictly sequential: the whole step, including the input projection, is
    evaluated inside the time loop (streaming-style extraction).
    """
    T, B, d = xt.shape
    h = np.zeros((B, d), np.float32)
    gi = np.empty((B, 3 * d), np.float32)
    gh = np.empty((B, 3 * d), np.float32)
    for t in range(T):
        gi[:] = bi
        _accum(gi, xt[t], W)
        gh[:] = bh
        _accum(gh, h, U)
        r = _sigmoid(gi[:, :d] + gh[:, :d])
        z = _sigmoid(gi[:, d:2 * d] + gh[:, d:2 * d])
        n = np.tanh(gi[:, 2 * d:] + r * gh[:, 2 * d:])
        h = (1.0 - z) * n + z * h
        out[t] = h


def gru_forward(x: np.ndarray, params: dict, layers: int = 3,
                bidirectional: bool = False) -> np.ndarray:
    """Stacked GRU over (B, T, d); bidirectional variant concatenates both
    directions and projects 2d -> d per layer."""
    B, T, d = x.shape
    xt = np.ascontiguousarray(x.swapaxes(0, 1))
    for l in range(layers):
        fwd = np.empty((T, B, d), np.float32)
        _gru_direction(xt, params[f"l{l}.f.W"], params[f"l{l}.f.U"],
                       params[f"l{l}.f.bi"], params[f"l{l}.f.bh"], fwd)
        if bidirectional:
            bwd = np.empty((T, B, d), np.float32)
            _gru_direction(np.ascontiguousarray(xt[::-1]),
                           params[f"l{l}.b.W"], params[f"l{l}.b.U"],
                           params[f"l{l}.b.bi"], params[f"l{l}.b.bh"], bwd)
            cat = np.concatenate([fwd, bwd[::-1]], axis=2)
            xt = np.ascontiguousarray(
                (cat.reshape(T * B, 2 * d) @ params[f"l{l}.proj"]).reshape(T, B, d))
        else:
            xt = fwd
    return np.ascontiguousarray(xt.swapaxes(0, 1))


def _layernorm(v, g, b):
    mu = v.mean(axis=-1, keepdims=True)
    s = v.var(axis=-1, keepdims=True)
    return (v - mu) / np.sqrt(s + 1e-5) * g + b


def sinusoidal_positions(T: int, d: int) -> np.ndarray:
    pos = np.arange(T, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.zeros((T, d), np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe.astype(np.float32)


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Softmax(q k^T / sqrt(d_h)) for (H, T, d_h) inputs; rows sum to 1."""
    a = q @ k.swapaxes(-1, -2) / np.sqrt(np.float32(q.shape[-1]))
    a -= a.max(axis=-1, keepdims=True)
    np.exp(a, out=a)
    a /= a.sum(axis=-1, keepdims=True)
    return a


def transformer_forward(x: np.ndarray, params: dict, layers: int = 3,
                        heads: int = 8) -> np.ndarray:
    """Pre-norm encoder stack: full self-attention + 4x feed-forward."""
    B, T, d = x.shape
    dh = d // heads
    y = x + sinusoidal_positions(T, d)[None]
    for l in range(layers):
        ln = _layernorm(y, params[f"l{l}.ln1.g"], params[f"l{l}.ln1.b"])
        flat = ln.reshape(B * T, d)
        q = (flat @ params[f"l{l}.wq"]).reshape(B, T, heads, dh)
        k = (flat @ params[f"l{l}.wk"]).reshape(B, T, heads, dh)
        v = (flat @ params[f"l{l}.wv"]).reshape(B, T, heads, dh)
        ctx = np.empty((B, T, heads, dh), np.float32)
        for b in range(B):   # per-item attention keeps the (H, T, T) buffer small
            qb = np.ascontiguousarray(q[b].swapaxes(0, 1))
            kb = np.ascontiguousarray(k[b].swapaxes(0, 1))
            vb = np.ascontiguousarray(v[b].swapaxes(0, 1))
            a = attention_weights(qb, kb)
            ctx[b] = (a @ vb).swapaxes(0, 1)
        y = y + (ctx.reshape(B * T, d) @ params[f"l{l}.wo"]).reshape(B, T, d)
        ln = _layernorm(y, params[f"l{l}.ln2.g"], params[f"l{l}.ln2.b"])
        hmid = np.maximum(ln.reshape(B * T, d) @ params[f"l{l}.w1"] + params[f"l{l}.b1"], 0.0)
        y = y + (hmid @ params[f"l{l}.w2"] + params[f"l{l}.b2"]).reshape(B, T, d)
    return y


def _norm_relu_(v2d: np.ndarray, T: int, B: int, d: int,
                g: np.ndarray, b: np.ndarray) -> None:
    v = v2d.reshape(T, B, d)
    mu = v.mean(axis=-1, keepdims=True)
    v -= mu
    s = (v * v).mean(axis=-1, keepdims=True)
    np.sqrt(s + np.float32(1e-5), out=s)
    v /= s
    v *= g
    v += b
    np.maximum(v2d, 0.0, out=v2d)


def npc_forward(x: np.ndarray, params: dict, layers: int = 3,
                receptive_field: int = 19, mask_size: int = 5) -> np.ndarray:
    """Masked-conv stack in time-major layout; masked taps are skipped outright."""
    B, T, d = x.shape
    plan = plan_masks(layers, receptive_field, mask_size)
    k = plan.kernel
    kc = (k - 1) // 2
    z = np.ascontiguousarray(x.swapaxes(0, 1))
    h = np.zeros((T * B, d), np.float32)
    for l in range(layers):
        zp = np.empty((T + 2, B, d), np.float32)
        zp[0] = 0.0
        zp[1:1 + T] = z
        zp[1 + T:] = 0.0
        c = np.empty((T * B, d), np.float32)
        c[:] = params[f"l{l}.conv.b"]
        for i in range(3):
            _accum(c, zp[i:i + T].reshape(T * B, d), params[f"l{l}.conv"][i])
        _norm_relu_(c, T, B, d, params[f"l{l}.cn.g"], params[f"l{l}.cn.b"])
        cv = c.reshape(T, B, d)
        cv += z
        z = cv
        zp = np.empty((T + 2 * kc, B, d), np.float32)
        zp[:kc] = 0.0
        zp[kc:kc + T] = z
        zp[kc + T:] = 0.0
        mask = plan.mask(l + 1)
        br = np.empty((T * B, d), np.float32)
        br[:] = params[f"l{l}.masked.b"]
        for i in range(k):
            if mask[i] != 0:
                _accum(br, zp[i:i + T].reshape(T * B, d), params[f"l{l}.masked"][i])
        _norm_relu_(br, T, B, d, params[f"l{l}.mn.g"], params[f"l{l}.mn.b"])
        h += br
    return np.ascontiguousarray(h.reshape(T, B, d).swapaxes(0, 1))


def run_forward(spec: BaselineSpec, x: np.ndarray, params: dict) -> np.ndarray:
    if spec.kind == "gru":
        return gru_forward(x, params, layers=spec.layers)
    if spec.kind == "bigru":
        return gru_forward(x, params, layers=spec.layers, bidirectional=True)
    if spec.kind == "transformer":
        return transformer_forward(x, params, layers=spec.layers, heads=spec.heads)
    if spec.kind == "npc":
        return npc_forward(x, params, layers=spec.layers,
                           receptive_field=spec.npc_receptive_field,
                           mask_size=spec.npc_mask_size)
    return x   # noop: measures harness overhead


def default_threads() -> int:
    env = os.environ.get("NPC_THREADS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def bench_run(spec: BaselineSpec, T: int, batch: int, reps: int = 100,
              warmup: int = 3, threads: Optional[int] = None,
              seed: int = 0) -> BenchRecord:
    """Wall-clock statistics over identical-input forward passes.

    Inputs and parameters are generated outside the timed region; the BLAS
    thread pool is pinned for the duration of the run.
    """
    if warmup < 3:
        raise BenchError("need warmup >= 3 discarded iterations")
    if threads is None:
        threads = default_threads()
    rng = np.random.default_rng(seed)
    params = build_params(spec, seed=seed)
    x = rng.standard_normal((batch, T, spec.d)).astype(np.float32)

    def timed():
        samples = []
        for _ in range(warmup):
            run_forward(spec, x, params)
        for _ in range(reps):
            t0 = time.perf_counter()
            run_forward(spec, x, params)
            samples.append(time.perf_counter() - t0)
        return np.array(samples)

    if threadpool_limits is not None:
        with threadpool_limits(limits=threads):
            samples = timed()
    else:                               # pragma: no cover
        samples = timed()
    mean_ms = float(samples.mean() * 1e3)
    return BenchRecord(kind=spec.kind, T=T, d=spec.d, batch=batch, reps=reps,
                       mean_ms=mean_ms, std_ms=float(samples.std() * 1e3),
                       per_frame_us=mean_ms * 1e3 / T, threads=threads)


def scaling_sweep(spec: BaselineSpec, t_list: list[int], batch: int,
                  reps: int = 10, warmup: int = 3, threads: Optional[int] = None,
                  seed: int = 0) -> list[BenchRecord]:
    if len(t_list) < 3:
        raise BenchError("need at least 3 sequence lengths")
    return [bench_run(spec, T, batch, reps=reps, warmup=warmup,
                      threads=threads, seed=seed) for T in t_list]


def fit_exponent(records: list[BenchRecord]) -> float:
    """Least-squares slope of log(total time) vs log(T)."""
    if len(records) < 3:
        raise BenchError("need at least 3 records to fit an exponent")
    t = np.log([r.T for r in records])
    y = np.log([r.mean_ms for r in records])
    return float(np.polyfit(t, y, 1)[0])


REPORT_HEADER = "kind,T,d,batch,threads,reps,mean_ms,std_ms,per_frame_us,relative_to_npc"


def emit_report(records: list[BenchRecord], path: str) -> None:
    """CSV report with a 'relative to NPC = 1x' column when an npc row exists."""
    if not records:
        raise BenchError("no records to report")
    npc_mean = next((r.mean_ms for r in records if r.kind == "npc"), None)
    with open(path, "w", encoding="utf-8") as f:
        f.write(REPORT_HEADER + "\n")
        for r in records:
            rel = "" if npc_mean is None else repr(r.mean_ms / npc_mean)
            f.write(f"{r.kind},{r.T},{r.d},{r.batch},{r.threads},{r.reps},"
                    f"{r.mean_ms!r},{r.std_ms!r},{r.per_frame_us!r},{rel}\n")
