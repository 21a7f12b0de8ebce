"""NPC architecture: mask-plan arithmetic, conv blocks, VQ bottleneck, prediction head.

The representation h_t is the sum over layers of masked-convolution branch
outputs taken from a trunk of receptive-field-3 conv blocks. Mask arithmetic
guarantees h_t never sees the center frame or its m nearest neighbors per side.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

CHECKPOINT_MAGIC = b"NPCK"
CHECKPOINT_VERSION = 1


class ModelError(Exception):
    pass


class ConfigError(ModelError):
    """Invalid or infeasible model configuration."""


class CheckpointError(ModelError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass(frozen=True)
class NpcConfig:
    layers: int
    receptive_field: int          # R, odd
    mask_size: int                # M_in, odd
    d: int = 512
    d_in: int = 80
    vq_groups: int = 4
    vq_codewords: int = 64
    vq_enabled: bool = True
    masked_conv_every_layer: bool = True

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.receptive_field % 2 == 0:
            raise ConfigError(f"receptive_field must be odd, got {self.receptive_field}")
        if self.mask_size % 2 == 0:
            raise ConfigError(f"mask_size must be odd, got {self.mask_size}")
        if self.d % self.vq_groups != 0:
            raise ConfigError("d must be divisible by vq_groups")
        plan_masks(self.layers, self.receptive_field, self.mask_size)

    @property
    def kernel_size(self) -> int:
        return self.receptive_field - 2 * self.layers

    @property
    def mask_half_width(self) -> int:
        return (self.mask_size - 1) // 2

    @property
    def field_half_width(self) -> int:
        return (self.receptive_field - 1) // 2


@dataclass(frozen=True)
class MaskPlan:
    """Per-layer masked-conv kernel size and mask half-widths."""

    kernel: int                   # k = R - 2L, same at every layer
    half_widths: tuple            # m_l = (M_in-1)/2 + l for l = 1..L

    def mask(self, layer: int) -> np.ndarray:
        """Binary kernel mask for 1-based layer index."""
        return build_mask(self.kernel, self.half_widths[layer - 1])


def plan_masks(layers: int, receptive_field: int, mask_size: int) -> MaskPlan:
    """Derive kernel size and per-layer mask half-widths; reject infeasible triples.

    Each trunk block spreads center-frame information one frame per side, so
    the forbidden half-width at layer l is (M_in-1)/2 + l. Feasibility demands
    at least one unmasked tap per side at the deepest layer:
    (R - 2L - 1)/2 > (M_in - 1)/2 + L.
    """
    if receptive_field % 2 == 0 or mask_size % 2 == 0:
        raise ConfigError("receptive_field and mask_size must both be odd")
    if layers < 1:
        raise ConfigError("layers must be >= 1")
    k = receptive_field - 2 * layers
    m = (mask_size - 1) // 2
    half_widths = tuple(m + l for l in range(1, layers + 1))
    if (k - 1) // 2 <= half_widths[-1]:
        raise ConfigError(
            f"infeasible (L={layers}, R={receptive_field}, M_in={mask_size}): "
            f"need (R - 2L - 1)/2 > (M_in - 1)/2 + L, "
            f"got {(k - 1) // 2} <= {half_widths[-1]}")
    return MaskPlan(kernel=k, half_widths=half_widths)


def build_mask(k: int, m: int) -> np.ndarray:
    """Binary kernel mask of length k: zero iff |i - (k-1)/2| <= m.

    Exactly 2m+1 zeros, centered; at least one unmasked tap per side.
    """
    if k % 2 == 0:
        raise ConfigError("kernel size must be odd")
    if not (0 <= m < (k - 1) // 2):
        raise ConfigError(f"need (k-1)/2 > m >= 0, got k={k}, m={m}")
    offsets = np.arange(k) - (k - 1) // 2
    return (np.abs(offsets) > m).astype(np.float64)


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    a = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-a, a, size=shape).astype(dtype)


class NpcModel:
    """Parameter container plus forward passes over the autodiff primitives."""

    def __init__(self, config: NpcConfig, params: dict[str, Tensor], dtype=np.float32):
        self.config = config
        self.plan = plan_masks(config.layers, config.receptive_field, config.mask_size)
        self.params = params
        self.dtype = dtype

    @classmethod
    def init(cls, config: NpcConfig, seed: int = 0, dtype=np.float32) -> "NpcModel":
        rng = np.random.default_rng(seed)
        c = config
        k = c.kernel_size
        params: dict[str, Tensor] = {}

        def add(name, data):
            params[name] = Tensor(np.ascontiguousarray(data), name=name)

        plan = plan_masks(c.layers, c.receptive_field, c.mask_size)
        for l in range(1, c.layers + 1):
            cin = c.d_in if l == 1 else c.d
            add(f"layer{l}.conv.w", _uniform(rng, (3, cin, c.d), 3 * cin, dtype))
            add(f"layer{l}.conv.b", np.zeros(c.d, dtype))
            add(f"layer{l}.conv_norm.g", np.ones(c.d, dtype))
            add(f"layer{l}.conv_norm.b", np.zeros(c.d, dtype))
            if l == 1 and c.d_in != c.d:
                add("layer1.inproj.w", _uniform(rng, (c.d_in, c.d), c.d_in, dtype))
                add("layer1.inproj.b", np.zeros(c.d, dtype))
            if c.masked_conv_every_layer or l == c.layers:
                w = _uniform(rng, (k, c.d, c.d), k * c.d, dtype)
                w *= plan.mask(l)[:, None, None].astype(dtype)   # masked taps start at 0
                add(f"layer{l}.masked.w", w)
                add(f"layer{l}.masked.b", np.zeros(c.d, dtype))
                add(f"layer{l}.masked_norm.g", np.ones(c.d, dtype))
                add(f"layer{l}.masked_norm.b", np.zeros(c.d, dtype))
        if c.vq_enabled:
            add("vq.proj.w", _uniform(rng, (c.d, c.vq_groups * c.vq_codewords), c.d, dtype))
            add("vq.proj.b", np.zeros(c.vq_groups * c.vq_codewords, dtype))
            dpg = c.d // c.vq_groups
            add("vq.codebook", _uniform(rng, (c.vq_groups, c.vq_codewords, dpg), dpg, dtype))
        add("head.w", _uniform(rng, (c.d, c.d_in), c.d, dtype))
        add("head.b", np.zeros(c.d_in, dtype))
        return cls(config, params, dtype)

    def masked_layers(self) -> list[int]:
        if self.config.masked_conv_every_layer:
            return list(range(1, self.config.layers + 1))
        return [self.config.layers]

    def astype(self, dtype) -> "NpcModel":
        params = {n: Tensor(p.data.astype(dtype), name=n) for n, p in self.params.items()}
        return NpcModel(self.config, params, dtype)

    def param_grads(self, grads_by_id: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
        """Map tape gradients to parameter names; unreachable params get zeros."""
        out = {}
        for name, p in self.params.items():
            g = grads_by_id.get(id(p))
            out[name] = np.zeros_like(p.data) if g is None else g
        return out

    def conv_block(self, layer: int, z: Tensor, tape: Optional[Tape] = None) -> Tensor:
        """Trunk block: conv(k=3) -> channel_norm -> relu -> residual add.

        Layer 1 projects the input once when d_in != d so the residual matches.
        """
        p = self.params
        conv = ad.conv1d(z, p[f"layer{layer}.conv.w"], p[f"layer{layer}.conv.b"], tape=tape)
        conv = ad.channel_norm(conv, p[f"layer{layer}.conv_norm.g"],
                               p[f"layer{layer}.conv_norm.b"], tape=tape)
        conv = ad.relu(conv, tape=tape)
        if layer == 1 and self.config.d_in != self.config.d:
            res = ad.affine(z, p["layer1.inproj.w"], p["layer1.inproj.b"], tape=tape)
        else:
            res = z
        return ad.add(conv, res, tape=tape)

    def masked_branch(self, layer: int, z: Tensor, tape: Optional[Tape] = None,
                      apply_mask: bool = True) -> Tensor:
        """Branch block: masked conv -> channel_norm -> relu (no residual)."""
        p = self.params
        mask = self.plan.mask(layer) if apply_mask else None
        br = ad.conv1d(z, p[f"layer{layer}.masked.w"], p[f"layer{layer}.masked.b"],
                       mask=mask, tape=tape)
        br = ad.channel_norm(br, p[f"layer{layer}.masked_norm.g"],
                             p[f"layer{layer}.masked_norm.b"], tape=tape)
        return ad.relu(br, tape=tape)

    def encode(self, frames: np.ndarray, tape: Optional[Tape] = None,
               apply_masks: bool = True) -> Tensor:
        """Context representation H (T, d): layer-sum of masked-conv branches."""
        c = self.config
        if frames.ndim != 2 or frames.shape[1] != c.d_in:
            raise ad.ShapeError(f"encode: expected (T, {c.d_in}) input, got {frames.shape}")
        z = Tensor(np.ascontiguousarray(frames, dtype=self.dtype))
        h = None
        masked = set(self.masked_layers())
        for l in range(1, c.layers + 1):
            z = self.conv_block(l, z, tape=tape)
            if l in masked:
                br = self.masked_branch(l, z, tape=tape, apply_mask=apply_masks)
                h = br if h is None else ad.add(h, br, tape=tape)
        return h

    def vq_forward(self, h: Tensor, tau: float, noise: Optional[np.ndarray] = None,
                   rng: Optional[np.random.Generator] = None, hard: bool = True,
                   tape: Optional[Tape] = None):
        """Quantize h through the grouped Gumbel-softmax bottleneck."""
        c = self.config
        if not c.vq_enabled:
            raise ModelError("vq_forward called but vq_enabled is false")
        logits = ad.affine(h, self.params["vq.proj.w"], self.params["vq.proj.b"], tape=tape)
        if rng is not None:
            noise = ad.sample_gumbel(rng, (h.shape[0], c.vq_groups, c.vq_codewords),
                                     dtype=self.dtype)
        return ad.gumbel_vq(logits, self.params["vq.codebook"], noise, tau,
                            hard=hard, tape=tape)

    def predict(self, q: Tensor, tape: Optional[Tape] = None) -> Tensor:
        return ad.affine(q, self.params["head.w"], self.params["head.b"], tape=tape)

    def forward(self, frames: np.ndarray, tau: float = 1.0,
                noise: Optional[np.ndarray] = None,
                rng: Optional[np.random.Generator] = None,
                valid: Optional[np.ndarray] = None, hard: bool = True,
                tape: Optional[Tape] = None):
        """Full pass: encode -> VQ -> predict -> L1 loss against the input frames.

        Returns (loss Tensor, info dict with h, y, indices, soft).
        """
        target = Tensor(np.ascontiguousarray(frames, dtype=self.dtype))
        h = self.encode(frames, tape=tape)
        indices = soft = None
        if self.config.vq_enabled:
            q, indices, soft = self.vq_forward(h, tau, noise=noise, rng=rng,
                                               hard=hard, tape=tape)
        else:
            q = h
        y = self.predict(q, tape=tape)
        loss = npc_loss(y, target, valid=valid, tape=tape)
        return loss, {"h": h, "y": y, "indices": indices, "soft": soft}


def npc_loss(y: Tensor, x: Tensor, valid: Optional[np.ndarray] = None,
             tape: Optional[Tape] = None) -> Tensor:
    """L1 reconstruction objective: sum of |y_t - x_t| over time and feature dims."""
    return ad.l1(y, x, valid=valid, tape=tape)


def codebook_perplexity(indices: np.ndarray, codewords: int) -> np.ndarray:
    """exp(entropy) of codeword usage per group; in [1, codewords]."""
    T, groups = indices.shape
    out = np.zeros(groups)
    for g in range(groups):
        counts = np.bincount(indices[:, g], minlength=codewords)
        probs = counts / max(T, 1)
        nz = probs[probs > 0]
        out[g] = np.exp(-(nz * np.log(nz)).sum())
    return out


def _config_items(config: NpcConfig) -> list[tuple[str, str]]:
    def fmt(v):
        return str(v).lower() if isinstance(v, bool) else str(v)
    return sorted((k, fmt(v)) for k, v in vars(config).items())


def _parse_config(items: dict[str, str]) -> NpcConfig:
    def as_bool(s):
        return {"true": True, "false": False}[s]
    try:
        return NpcConfig(
            layers=int(items["layers"]),
            receptive_field=int(items["receptive_field"]),
            mask_size=int(items["mask_size"]),
            d=int(items["d"]),
            d_in=int(items["d_in"]),
            vq_groups=int(items["vq_groups"]),
            vq_codewords=int(items["vq_codewords"]),
            vq_enabled=as_bool(items["vq_enabled"]),
            masked_conv_every_layer=as_bool(items["masked_conv_every_layer"]),
        )
    except KeyError as e:
        raise CheckpointError(f"checkpoint config missing key {e}") from None


def save_checkpoint(model: NpcModel, path: str) -> None:
    """Write magic, version, config block, named float32 tensors, CRC32 trailer."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    items = _config_items(model.config)
    chunks.append(struct.pack("<I", len(items)))
    for key, val in items:
        line = f"{key}={val}".encode("utf-8")
        chunks.append(struct.pack("<I", len(line)))
        chunks.append(line)
    chunks.append(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        nb = name.encode("utf-8")
        data = np.ascontiguousarray(p.data, dtype="<f4")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_checkpoint(path: str, dtype=np.float32) -> NpcModel:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint file")
    body, trailer = blob[:-4], blob[-4:]
    if struct.unpack("<I", trailer)[0] != (zlib.crc32(body) & 0xFFFFFFFF):
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupt")
    off = 4
    (version,) = struct.unpack_from("<I", body, off); off += 4
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    (n_items,) = struct.unpack_from("<I", body, off); off += 4
    items = {}
    for _ in range(n_items):
        (ln,) = struct.unpack_from("<I", body, off); off += 4
        key, _, val = body[off:off + ln].decode("utf-8").partition("="); off += ln
        items[key] = val
    config = _parse_config(items)
    (n_tensors,) = struct.unpack_from("<I", body, off); off += 4
    params: dict[str, Tensor] = {}
    for _ in range(n_tensors):
        (ln,) = struct.unpack_from("<I", body, off); off += 4
        name = body[off:off + ln].decode("utf-8"); off += ln
        (rank,) = struct.unpack_from("<I", body, off); off += 4
        dims = struct.unpack_from(f"<{rank}I", body, off); off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        params[name] = Tensor(arr.astype(dtype), name=name)
    model = NpcModel(config, params, dtype)
    expected = set(NpcModel.init(config, seed=0, dtype=dtype).params)
    if set(params) != expected:
        raise CheckpointError(f"{path}: tensor names do not match the config")
    return model
