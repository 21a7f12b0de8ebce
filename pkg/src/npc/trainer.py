"""Self-supervised training loop, seeded end to end for bit reproducibility."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape
from .features import FeatureSequence
from .model import NpcModel, codebook_perplexity, save_checkpoint


class TrainerError(Exception):
    pass


class NonFiniteLossError(TrainerError):
    """Loss went NaN/inf; carries the step and epoch where it happened."""

    def __init__(self, message: str, step: int, epoch: int):
        super().__init__(message)
        self.step = step
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    tau0: float = 2.0
    tau_decay: float = 0.9995
    tau_floor: float = 0.5
    max_frames: int = 2000          # utterances are truncated to this many frames
    log_every: int = 1
    grad_clip: Optional[float] = None
    checkpoint_every: int = 0       # epochs between checkpoints; 0 = final only

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise TrainerError("need epochs >= 1, batch_size >= 1, lr > 0")


def temperature(step: int, cfg: TrainConfig) -> float:
    """Gumbel temperature: tau0 * decay^step, floored."""
    if step < 0:
        raise TrainerError("step must be >= 0")
    return max(cfg.tau_floor, cfg.tau0 * cfg.tau_decay ** step)


class TrainLog:
    """Per-step training records; CSV columns are fixed by the group count."""

    def __init__(self, vq_groups: int):
        self.vq_groups = vq_groups
        self.rows: list[dict] = []

    def header(self) -> list[str]:
        ppl = [f"perplexity_g{g + 1}" for g in range(self.vq_groups)]
        return ["step", "epoch", "loss_sum", "loss_per_frame", "tau"] + ppl + ["wall_ms"]

    def add(self, **row):
        self.rows.append(row)

    def write_csv(self, path: str) -> None:
        cols = self.header()
        with open(path, "w", encoding="utf-8") as f:
            f.write(",".join(cols) + "\n")
            for row in self.rows:
                f.write(",".join(_fmt(row[c]) for c in cols) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _batches(order: np.ndarray, size: int):
    for i in range(0, len(order), size):
        yield order[i:i + size]


def train(model: NpcModel, corpus: list[FeatureSequence], cfg: TrainConfig,
          checkpoint_dir: Optional[str] = None) -> TrainLog:
    """Run the L1 self-prediction objective over the corpus; mutates the model.

    Utterances in a batch are zero-padded to the batch max length; padding
    frames are excluded from the loss via a validity mask. The optimized
    objective is the mean per-frame loss; the summed loss is logged alongside.
    """
    if not corpus:
        raise TrainerError("empty corpus")
    c = model.config
    seq = np.random.SeedSequence(cfg.seed)
    rng_order, rng_noise = (np.random.default_rng(s) for s in seq.spawn(2))
    state = AdamState(lr=cfg.lr)
    log = TrainLog(c.vq_groups)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng_order.permutation(len(corpus))
        for batch in _batches(order, cfg.batch_size):
            t0 = time.perf_counter()
            tau = temperature(step, cfg)
            lengths = [min(corpus[i].n_frames, cfg.max_frames) for i in batch]
            t_max = max(lengths)
            n_valid = sum(lengths)
            acc: dict[str, np.ndarray] = {}
            loss_sum = 0.0
            index_rows = []
            for i, t_len in zip(batch, lengths):
                frames = np.zeros((t_max, c.d_in), dtype=model.dtype)
                frames[:t_len] = corpus[i].frames[:t_len]
                valid = np.zeros(t_max, dtype=model.dtype)
                valid[:t_len] = 1.0
                noise = None
                if c.vq_enabled:
                    noise = ad.sample_gumbel(
                        rng_noise, (t_max, c.vq_groups, c.vq_codewords), dtype=model.dtype)
                tape = Tape()
                try:
                    loss, info = model.forward(frames, tau=tau, noise=noise,
                                               valid=valid, hard=True, tape=tape)
                except ad.NonFiniteError as e:
                    raise NonFiniteLossError(
                        f"non-finite value at step {step}, epoch {epoch}: {e}",
                        step=step, epoch=epoch) from e
                loss_sum += float(loss.data)
                grads = ad.backward(tape, loss, seed=1.0 / n_valid)
                for name, g in model.param_grads(grads).items():
                    if name in acc:
                        acc[name] += g
                    else:
                        acc[name] = g
                if info["indices"] is not None:
                    index_rows.append(info["indices"][:t_len])
            if not np.isfinite(loss_sum):
                raise NonFiniteLossError(
                    f"non-finite loss at step {step}, epoch {epoch}",
                    step=step, epoch=epoch)
            if cfg.grad_clip is not None:
                total = np.sqrt(sum(float((g * g).sum()) for g in acc.values()))
                if total > cfg.grad_clip:
                    scale = cfg.grad_clip / total
                    for g in acc.values():
                        g *= scale
            ad.adam_step(model.params, acc, state)
            step += 1
            if step % cfg.log_every == 0:
                if index_rows:
                    ppl = codebook_perplexity(np.concatenate(index_rows), c.vq_codewords)
                else:
                    ppl = np.zeros(c.vq_groups)
                row = {"step": step, "epoch": epoch, "loss_sum": loss_sum,
                       "loss_per_frame": loss_sum / n_valid, "tau": tau,
                       "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3)}
                for g in range(c.vq_groups):
                    row[f"perplexity_g{g + 1}"] = float(ppl[g])
                log.add(**row)
        if checkpoint_dir and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(model, os.path.join(checkpoint_dir, f"epoch{epoch:04d}.npck"))
    return log


def evaluate_loss(model: NpcModel, corpus: list[FeatureSequence],
                  max_frames: int = 2000) -> float:
    """Deterministic mean per-frame loss: zero Gumbel noise, floor temperature."""
    total = 0.0
    frames_seen = 0
    for utt in corpus:
        frames = utt.frames[:max_frames]
        loss, _ = model.forward(frames, tau=0.5, noise=None, hard=True)
        total += float(loss.data)
        frames_seen += frames.shape[0]
    return total / frames_seen
