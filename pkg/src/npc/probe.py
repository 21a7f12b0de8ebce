"""Linear probes: frame-wise and utterance-level separability of frozen representations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import AdamState, Tensor, adam_step


class ProbeError(Exception):
    pass


class SingleClassError(ProbeError):
    """Fewer than two classes present in the training split."""


@dataclass
class LinearProbe:
    weight: np.ndarray     # (d, C)
    bias: np.ndarray       # (C,)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]

    def predict(self, X: np.ndarray) -> np.ndarray:
        if X.ndim != 2 or X.shape[1] != self.weight.shape[0]:
            raise ProbeError(f"expected (N, {self.weight.shape[0]}) inputs, got {X.shape}")
        return np.argmax(X @ self.weight + self.bias, axis=1)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_probe(X: np.ndarray, y: np.ndarray, n_classes: Optional[int] = None,
              train_frac: float = 0.9, seed: int = 0, lr: float = 1e-3,
              max_epochs: int = 2000, patience: int = 200) -> tuple[LinearProbe, dict]:
    """Multinomial logistic regression by full-batch Adam with early stopping.

    The held-out fraction drives early stopping on classification error; the
    best-so-far weights are returned. Deterministic given the seed.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ProbeError(f"bad data shapes X{X.shape} y{y.shape}")
    if n_classes is None:
        n_classes = int(y.max()) + 1
    rng = np.random.default_rng(seed)
    order = rng.permutation(X.shape[0])
    n_train = max(1, int(round(train_frac * X.shape[0])))
    tr, va = order[:n_train], order[n_train:]
    Xt, yt = X[tr], y[tr]
    if np.unique(yt).size < 2:
        raise SingleClassError("need >= 2 classes in the training split")
    Xv, yv = X[va], y[va]

    d = X.shape[1]
    params = {"w": Tensor(np.zeros((d, n_classes)), name="w"),
              "b": Tensor(np.zeros(n_classes), name="b")}
    state = AdamState(lr=lr)
    onehot = np.zeros((len(yt), n_classes))
    onehot[np.arange(len(yt)), yt] = 1.0

    best = (np.inf, params["w"].data.copy(), params["b"].data.copy())
    bad_epochs = 0
    for epoch in range(max_epochs):
        probs = _softmax(Xt @ params["w"].data + params["b"].data)
        g = (probs - onehot) / len(yt)
        grads = {"w": Xt.T @ g, "b": g.sum(axis=0)}
        adam_step(params, grads, state)
        if len(yv):
            pred = np.argmax(Xv @ params["w"].data + params["b"].data, axis=1)
            err = float(np.mean(pred != yv))
            if err < best[0] - 1e-12:
                best = (err, params["w"].data.copy(), params["b"].data.copy())
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= patience:
                    break
    if len(yv):
        probe = LinearProbe(weight=best[1], bias=best[2])
        valid_err = best[0]
    else:
        probe = LinearProbe(weight=params["w"].data.copy(), bias=params["b"].data.copy())
        valid_err = float("nan")
    train_err = evaluate(probe, Xt, yt)
    return probe, {"train_err": train_err, "valid_err": valid_err,
                   "epochs": epoch + 1, "n_train": len(yt), "n_valid": len(yv)}


def evaluate(probe: LinearProbe, X: np.ndarray, y: np.ndarray) -> float:
    """Fraction misclassified; argmax ties resolve to the lowest class index."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (X.shape[0],):
        raise ProbeError(f"labels {y.shape} do not match inputs {X.shape}")
    return float(np.mean(probe.predict(X) != y))


def framewise_dataset(reps: list[np.ndarray], labels: list[np.ndarray]):
    """Stack per-utterance (T, d) representations and (T,) frame labels."""
    if len(reps) != len(labels):
        raise ProbeError("representation/label list length mismatch")
    for r, l in zip(reps, labels):
        if r.shape[0] != l.shape[0]:
            raise ProbeError(f"frames {r.shape[0]} != labels {l.shape[0]}")
    return np.concatenate(reps, axis=0), np.concatenate(labels, axis=0)


def utterance_dataset(reps: list[np.ndarray], speakers: list[str]):
    """Mean-pool each utterance over time; integer-encode speaker labels."""
    if len(reps) != len(speakers):
        raise ProbeError("representation/speaker list length mismatch")
    X = np.stack([r.mean(axis=0) for r in reps])
    uniq = sorted(set(speakers))
    index = {s: i for i, s in enumerate(uniq)}
    y = np.array([index[s] for s in speakers], dtype=np.int64)
    return X, y, uniq
