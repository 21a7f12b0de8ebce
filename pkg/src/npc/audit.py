"""Perturbation certificates for masking and locality, plus kernel-magnitude analysis.

The masking certificate is exact: h_t must be bit-identical under arbitrary
replacement of the masked frames (tolerance 0, not 1e-12). Receptive-field
audits compare empirically detected dependency sets against an independent
symbolic propagation oracle that pushes frame-ancestor sets through the stack.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import NpcModel, plan_masks


def dependency_offsets(layers: int, receptive_field: int, mask_size: int,
                       every_layer: bool = True) -> set[int]:
    """Symbolic propagation oracle: offsets of input frames that can reach h_0.

    Simulates ancestor sets frame by frame through the trunk (conv k=3 plus
    residual) and the masked branches, using plain set arithmetic. Independent
    of the numeric forward pass.
    """
    plan = plan_masks(layers, receptive_field, mask_size)
    r = (receptive_field - 1) // 2
    n = 4 * r + 1   # strip wide enough that the center never touches the edge
    center = 2 * r
    trunk = [{u} for u in range(n)]
    k = plan.kernel
    kc = (k - 1) // 2
    h_sets: list[set[int]] = [set() for _ in range(n)]
    for l in range(1, layers + 1):
        new = []
        for u in range(n):
            s = set(trunk[u])                      # residual path
            for delta in (-1, 0, 1):               # trunk conv, kernel 3
                v = u + delta
                if 0 <= v < n:
                    s |= trunk[v]
            new.append(s)
        trunk = new
        if every_layer or l == layers:
            m = plan.half_widths[l - 1]
            for u in range(n):
                for i in range(k):
                    if abs(i - kc) <= m:
                        continue
                    v = u + i - kc
                    if 0 <= v < n:
                        h_sets[u] |= trunk[v]
    return {s - center for s in h_sets[center]}


def predicted_offsets(receptive_field: int, mask_size: int) -> set[int]:
    """Dependency set claimed by the mask plan: m < |offset| <= r."""
    r = (receptive_field - 1) // 2
    m = (mask_size - 1) // 2
    return {o for o in range(-r, r + 1) if m < abs(o) <= r}


def encode_window(model: NpcModel, frames: np.ndarray, t: int) -> np.ndarray:
    """h_t recomputed on the minimal window [t-r, t+r]; bit-exact vs full encode."""
    r = model.config.field_half_width
    start = max(0, t - r)
    end = min(frames.shape[0], t + r + 1)
    h = model.encode(frames[start:end])
    return h.data[t - start]


def audit_mask(model: NpcModel, frames: np.ndarray, t: int, trials: int = 4,
               rng: Optional[np.random.Generator] = None,
               apply_masks: bool = True) -> float:
    """Max |change in h_t| under random replacement of the masked frames.

    The contract for any well-formed model is exactly 0. apply_masks=False
    runs the same audit with the kernel mask disabled (sensitivity control).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    T = frames.shape[0]
    if not (0 <= t < T):
        raise ValueError(f"t={t} outside [0, {T})")
    m = model.config.mask_half_width
    r = model.config.field_half_width
    start = max(0, t - r)
    end = min(T, t + r + 1)
    window = np.ascontiguousarray(frames[start:end])
    tc = t - start
    base = model.encode(window, apply_masks=apply_masks).data[tc]
    lo, hi = max(0, tc - m), min(window.shape[0], tc + m + 1)
    worst = 0.0
    for _ in range(trials):
        pert = window.copy()
        pert[lo:hi] = rng.standard_normal((hi - lo, window.shape[1])).astype(window.dtype)
        h = model.encode(pert, apply_masks=apply_masks).data[tc]
        delta = float(np.max(np.abs(h - base)))
        if delta > worst:
            worst = delta
    return worst


@dataclass(frozen=True)
class AuditReport:
    t: int
    detected: tuple            # offsets (relative to t) where h_t changed
    expected: tuple            # oracle offsets, clipped to the sequence
    max_delta_masked: float    # max |change| under in-mask perturbations
    mask_ok: bool              # max_delta_masked == 0
    local_ok: bool             # detected is a subset of expected
    tight_ok: bool             # detected equals expected


def audit_receptive_field(model: NpcModel, frames: np.ndarray, t: int,
                          trials: int = 3, slack: int = 3,
                          rng: Optional[np.random.Generator] = None) -> AuditReport:
    """Perturb one frame at a time; detected set vs the symbolic oracle.

    Perturbations are whole-frame Gaussian replacements (defeats dead relus);
    the detected set is the union over `trials` redraws.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    c = model.config
    T = frames.shape[0]
    r = c.field_half_width
    base = encode_window(model, frames, t)
    detected = set()
    max_delta_masked = 0.0
    m = c.mask_half_width
    for s in range(max(0, t - r - slack), min(T, t + r + slack + 1)):
        changed = False
        for _ in range(trials):
            pert = frames.copy()
            pert[s] = rng.standard_normal(frames.shape[1]).astype(frames.dtype)
            h = encode_window(model, pert, t)
            delta = float(np.max(np.abs(h - base)))
            if delta != 0.0:
                changed = True
            if abs(s - t) <= m and delta > max_delta_masked:
                max_delta_masked = delta
        if changed:
            detected.add(s - t)
    oracle = dependency_offsets(c.layers, c.receptive_field, c.mask_size,
                                every_layer=c.masked_conv_every_layer)
    expected = {o for o in oracle if 0 <= t + o < T}
    return AuditReport(
        t=t,
        detected=tuple(sorted(detected)),
        expected=tuple(sorted(expected)),
        max_delta_masked=max_delta_masked,
        mask_ok=max_delta_masked == 0.0,
        local_ok=detected.issubset(expected),
        tight_ok=detected == expected,
    )


def mask_integrity_violations(model: NpcModel) -> list[str]:
    """Static certificate: masked kernel positions must hold exact zeros."""
    bad = []
    for l in model.masked_layers():
        w = model.params[f"layer{l}.masked.w"].data
        mask = model.plan.mask(l)
        if np.any(w[mask == 0] != 0.0):
            bad.append(f"layer{l}.masked.w has nonzero weights at masked taps")
    return bad


@dataclass(frozen=True)
class MagnitudeProfile:
    """Per masked-conv layer: normalized |W| per time offset; masked offsets are 0."""

    layers: tuple              # 1-based layer indices
    offsets: tuple             # tap offsets, -(k-1)/2 .. +(k-1)/2
    magnitude: np.ndarray      # (n_layers, k), rows sum to 1

    def rows(self):
        for i, l in enumerate(self.layers):
            for j, o in enumerate(self.offsets):
                yield l, o, float(self.magnitude[i, j])

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("layer,offset,magnitude\n")
            for l, o, v in self.rows():
                f.write(f"{l},{o},{v!r}\n")


def kernel_magnitude_profile(model: NpcModel) -> MagnitudeProfile:
    """Summed |W| per kernel offset, normalized to 1 within each masked layer."""
    layers = model.masked_layers()
    k = model.plan.kernel
    mags = np.zeros((len(layers), k))
    for i, l in enumerate(layers):
        w = model.params[f"layer{l}.masked.w"].data
        mags[i] = np.abs(w).sum(axis=(1, 2))
        total = mags[i].sum()
        if total > 0:
            mags[i] /= total
    offsets = tuple(int(o) for o in np.arange(k) - (k - 1) // 2)
    return MagnitudeProfile(layers=tuple(layers), offsets=offsets, magnitude=mags)


def adjacent_offsets_dominate(profile: MagnitudeProfile, model: NpcModel) -> list[bool]:
    """Per layer: do the taps adjacent to the mask carry the per-side maximum?

    Reported qualitatively (the claim holds for trained models at paper scale;
    at desk scale it is an expectation, not an assertion).
    """
    out = []
    offsets = np.array(profile.offsets)
    for i, l in enumerate(profile.layers):
        m = model.plan.half_widths[l - 1]
        mag = profile.magnitude[i]
        left = mag[offsets < -m]
        right = mag[offsets > m]
        ok_left = left.size > 0 and left.argmax() == left.size - 1   # offset -(m+1)
        ok_right = right.size > 0 and right.argmax() == 0            # offset +(m+1)
        out.append(bool(ok_left and ok_right))
    return out
