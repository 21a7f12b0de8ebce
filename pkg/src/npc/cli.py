"""Command-line entry point: train, extract, probe, audit, bench, analyze-kernels, make-toy-corpus.

Exit codes: 0 success, 1 configuration error, 2 data error (missing or corrupt
files), 3 non-finite training loss, 4 failed audit certificate.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import audit as audit_mod
from . import bench as bench_mod
from . import features as feat_mod
from . import probe as probe_mod
from .autodiff import AutodiffError
from .model import (CheckpointError, ConfigError, ModelError, NpcConfig,
                    NpcModel, load_checkpoint, save_checkpoint)
from .probe import ProbeError
from .toydata import ToyCorpusConfig, make_toy_corpus
from .trainer import NonFiniteLossError, TrainConfig, TrainerError, train

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NONFINITE = 3
EXIT_AUDIT = 4


class CliConfigError(Exception):
    pass


def read_config(path: str) -> dict[str, str]:
    """Flat key=value file; # starts a comment; blank lines ignored."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliConfigError(f"{path}:{line_no}: expected key=value")
            key, _, val = line.partition("=")
            out[key.strip()] = val.strip()
    return out


def write_config(path: str, items: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for k in sorted(items):
            f.write(f"{k}={items[k]}\n")


def _get(cfg: dict, key: str, cast, default):
    if key not in cfg:
        if default is None:
            raise CliConfigError(f"missing required config key {key!r}")
        return default
    raw = cfg[key]
    if cast is bool:
        if raw.lower() not in ("true", "false"):
            raise CliConfigError(f"config key {key!r} must be true or false")
        return raw.lower() == "true"
    try:
        return cast(raw)
    except ValueError:
        raise CliConfigError(f"config key {key!r}: cannot parse {raw!r}") from None


def load_corpus(manifest_path: str, params: feat_mod.FrameParams, mode: str):
    """Features, frame labels, and speakers for every manifest entry."""
    entries = feat_mod.read_manifest(manifest_path)
    raw = []
    for e in entries:
        sig = feat_mod.load_wav(e.wav_path)
        f = feat_mod.log_mel(sig, params)
        f.utterance_id = e.utterance_id
        raw.append(f)
    if mode == "speaker":
        by_speaker: dict[str, list] = {}
        for e, f in zip(entries, raw):
            by_speaker.setdefault(e.speaker_id, []).append(f)
        stats = {s: feat_mod.speaker_statistics(fs) for s, fs in by_speaker.items()}
        feats = [feat_mod.normalize(f, "speaker", stats[e.speaker_id])
                 for e, f in zip(entries, raw)]
    else:
        feats = [feat_mod.normalize(f, "utterance") for f in raw]
    return entries, feats


def _frame_params(cfg: dict) -> feat_mod.FrameParams:
    return feat_mod.FrameParams(
        window_ms=_get(cfg, "window_ms", float, 25.0),
        hop_ms=_get(cfg, "hop_ms", float, 10.0),
        n_mels=_get(cfg, "n_mels", int, 80),
    )


def cmd_train(args) -> int:
    cfg = read_config(args.config)
    seed = args.seed if args.seed is not None else _get(cfg, "seed", int, 0)
    out_dir = args.out or _get(cfg, "out_dir", str, None)
    os.makedirs(out_dir, exist_ok=True)
    params = _frame_params(cfg)
    mode = _get(cfg, "normalize", str, "utterance")
    model_cfg = NpcConfig(
        layers=_get(cfg, "layers", int, None),
        receptive_field=_get(cfg, "receptive_field", int, None),
        mask_size=_get(cfg, "mask_size", int, None),
        d=_get(cfg, "dim", int, 512),
        d_in=params.n_mels,
        vq_groups=_get(cfg, "vq_groups", int, 4),
        vq_codewords=_get(cfg, "vq_codewords", int, 64),
        vq_enabled=_get(cfg, "vq_enabled", bool, True),
        masked_conv_every_layer=_get(cfg, "masked_conv_every_layer", bool, True),
    )
    train_cfg = TrainConfig(
        epochs=_get(cfg, "epochs", int, 50),
        batch_size=_get(cfg, "batch_size", int, 32),
        lr=_get(cfg, "lr", float, 1e-3),
        seed=seed,
        tau0=_get(cfg, "tau0", float, 2.0),
        tau_decay=_get(cfg, "tau_decay", float, 0.9995),
        tau_floor=_get(cfg, "tau_floor", float, 0.5),
        max_frames=_get(cfg, "max_frames", int, 2000),
        log_every=_get(cfg, "log_every", int, 1),
        grad_clip=_get(cfg, "grad_clip", float, 0.0) or None,
        checkpoint_every=_get(cfg, "checkpoint_every", int, 0),
    )
    manifest = _get(cfg, "manifest", str, None)
    if not os.path.isabs(manifest):
        manifest = os.path.join(os.path.dirname(os.path.abspath(args.config)), manifest)
    _, feats = load_corpus(manifest, params, mode)

    model = NpcModel.init(model_cfg, seed=seed)
    try:
        log = train(model, feats, train_cfg, checkpoint_dir=out_dir)
    except NonFiniteLossError as e:
        diag = {"error": str(e), "step": e.step, "epoch": e.epoch}
        with open(os.path.join(out_dir, "nonfinite_diag.json"), "w") as f:
            json.dump(diag, f, indent=2)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    save_checkpoint(model, os.path.join(out_dir, "checkpoint.npck"))
    log.write_csv(os.path.join(out_dir, "train_log.csv"))
    resolved = dict(cfg)
    resolved.update({"seed": seed, "out_dir": out_dir, "manifest": manifest,
                     "d_in": params.n_mels})
    write_config(os.path.join(out_dir, "config.resolved"), resolved)
    print(f"trained {train_cfg.epochs} epochs; wrote {out_dir}/checkpoint.npck")
    return EXIT_OK


def cmd_extract(args) -> int:
    model = load_checkpoint(args.checkpoint)
    params = feat_mod.FrameParams(window_ms=args.window_ms, hop_ms=args.hop_ms,
                                  n_mels=model.config.d_in)
    _, feats = load_corpus(args.manifest, params, args.normalize)
    os.makedirs(args.out, exist_ok=True)
    for f in feats:
        if f.d_in != model.config.d_in:
            raise CheckpointError(
                f"feature dim {f.d_in} != checkpoint d_in {model.config.d_in}")
        h = model.encode(f.frames).data
        out = feat_mod.FeatureSequence(frames=h, utterance_id=f.utterance_id)
        feat_mod.write_feature_file(
            os.path.join(args.out, f"{f.utterance_id}.npcf"), out)
    print(f"wrote {len(feats)} representation files to {args.out}")
    return EXIT_OK


def _probe_split(n: int, seed: int):
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_test = max(1, n // 10)
    return order[n_test:], order[:n_test]


def cmd_probe(args) -> int:
    entries = feat_mod.read_manifest(args.manifest)
    if args.reps_dir:
        reps = [feat_mod.read_feature_file(
            os.path.join(args.reps_dir, f"{e.utterance_id}.npcf"),
            e.utterance_id).frames for e in entries]
        rep_name = "npc"
    else:
        params = feat_mod.FrameParams(n_mels=args.n_mels)
        _, feats = load_corpus(args.manifest, params, "utterance")
        reps = [f.frames for f in feats]
        rep_name = "logmel"

    fit_idx, test_idx = _probe_split(len(entries), args.seed)
    rows = []
    for task in args.tasks.split(","):
        if task == "phone":
            labels = [feat_mod.read_frame_labels(e.label_path) for e in entries]
            labels = [l[:r.shape[0]] for l, r in zip(labels, reps)]
            Xf, yf = probe_mod.framewise_dataset(
                [reps[i] for i in fit_idx], [labels[i] for i in fit_idx])
            Xt, yt = probe_mod.framewise_dataset(
                [reps[i] for i in test_idx], [labels[i] for i in test_idx])
        elif task == "speaker":
            X, y, _ = probe_mod.utterance_dataset(reps, [e.speaker_id for e in entries])
            Xf, yf = X[fit_idx], y[fit_idx]
            Xt, yt = X[test_idx], y[test_idx]
        else:
            raise CliConfigError(f"unknown probe task {task!r}")
        lp, info = probe_mod.fit_probe(Xf, yf, train_frac=args.train_frac,
                                       seed=args.seed)
        test_err = probe_mod.evaluate(lp, Xt, yt)
        rows.append((task, rep_name, info["train_err"], info["valid_err"],
                     test_err, args.seed))
        print(f"{task}/{rep_name}: train_err={info['train_err']:.4f} "
              f"valid_err={info['valid_err']:.4f} test_err={test_err:.4f}")
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("task,representation,train_err,valid_err,test_err,seed\n")
        for r in rows:
            f.write(f"{r[0]},{r[1]},{r[2]!r},{r[3]!r},{r[4]!r},{r[5]}\n")
    return EXIT_OK


def cmd_audit(args) -> int:
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        cfg = NpcConfig(layers=args.layers, receptive_field=args.receptive_field,
                        mask_size=args.mask_size, d=args.dim, d_in=args.d_in,
                        vq_groups=args.vq_groups,
                        vq_codewords=args.vq_codewords)
        model = NpcModel.init(cfg, seed=args.seed)
    c = model.config
    rng = np.random.default_rng(args.seed)
    T = c.receptive_field + 17
    failures = list(audit_mod.mask_integrity_violations(model))

    rows = []
    worst = 0.0
    for _ in range(args.pairs):
        x = rng.standard_normal((T, c.d_in)).astype(np.float32)
        t = int(rng.integers(T))
        delta = audit_mod.audit_mask(model, x, t, trials=args.trials, rng=rng)
        worst = max(worst, delta)
        rows.append(("mask", t, delta, delta == 0.0))
        if delta != 0.0:
            failures.append(f"mask certificate violated at t={t}: |dh|={delta}")
    for _ in range(args.rf_probes):
        x = rng.standard_normal((T, c.d_in)).astype(np.float32)
        t = int(rng.integers(c.field_half_width, T - c.field_half_width))
        rep = audit_mod.audit_receptive_field(model, x, t, trials=args.trials, rng=rng)
        rows.append(("receptive_field", t, rep.max_delta_masked,
                     rep.mask_ok and rep.local_ok and rep.tight_ok))
        if not (rep.mask_ok and rep.local_ok and rep.tight_ok):
            failures.append(
                f"receptive-field certificate at t={t}: detected={rep.detected} "
                f"expected={rep.expected}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write("check,t,max_delta_masked,ok\n")
            for name, t, delta, ok in rows:
                f.write(f"{name},{t},{delta!r},{ok}\n")
    for msg in failures:
        print(f"FAIL: {msg}", file=sys.stderr)
    if failures:
        return EXIT_AUDIT
    print(f"all certificates passed ({len(rows)} checks, max in-mask |dh| = {worst})")
    return EXIT_OK


def cmd_bench(args) -> int:
    t_list = [int(s) for s in args.T.split(",")]
    records = []
    for kind in args.specs.split(","):
        spec = bench_mod.BaselineSpec(kind=kind, layers=args.layers, d=args.dim,
                                      heads=args.heads,
                                      npc_receptive_field=args.npc_receptive_field,
                                      npc_mask_size=args.npc_mask_size)
        recs = [bench_mod.bench_run(spec, T, args.batch, reps=args.reps,
                                    warmup=args.warmup, threads=args.threads,
                                    seed=args.seed) for T in t_list]
        records.extend(recs)
        for r in recs:
            print(f"{r.kind}: T={r.T} mean={r.mean_ms:.2f}ms std={r.std_ms:.2f}ms "
                  f"per_frame={r.per_frame_us:.1f}us threads={r.threads}")
        if len(recs) >= 3:
            print(f"{kind}: fitted exponent of time vs T = "
                  f"{bench_mod.fit_exponent(recs):.3f}")
    bench_mod.emit_report(records, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_analyze_kernels(args) -> int:
    model = load_checkpoint(args.checkpoint)
    profile = audit_mod.kernel_magnitude_profile(model)
    profile.write_csv(args.out)
    flags = audit_mod.adjacent_offsets_dominate(profile, model)
    for layer, ok in zip(profile.layers, flags):
        print(f"layer {layer}: adjacent-to-mask offsets dominate per side: {ok}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_make_toy_corpus(args) -> int:
    cfg = ToyCorpusConfig(n_utterances=args.n, sample_rate=args.sample_rate,
                          n_speakers=args.speakers, seed=args.seed)
    manifest = make_toy_corpus(args.out, cfg)
    print(f"wrote {args.n} utterances; manifest at {manifest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="npc",
                                 description="Masked-convolution predictive coding toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a feature corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("extract", help="write representations for a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--normalize", default="utterance", choices=["utterance", "speaker"])
    p.add_argument("--window-ms", type=float, default=25.0)
    p.add_argument("--hop-ms", type=float, default=10.0)
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("probe", help="linear probing of representations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--reps-dir", default=None,
                   help="directory of .npcf files; omit to probe raw log-Mel")
    p.add_argument("--tasks", default="phone,speaker")
    p.add_argument("--train-frac", type=float, default=0.9)
    p.add_argument("--n-mels", type=int, default=80)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("audit", help="masking and locality certificates")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--receptive-field", type=int, default=23)
    p.add_argument("--mask-size", type=int, default=5)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--d-in", type=int, default=80)
    p.add_argument("--vq-groups", type=int, default=4)
    p.add_argument("--vq-codewords", type=int, default=64)
    p.add_argument("--pairs", type=int, default=50)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--rf-probes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_audit)

    p = sub.add_parser("bench", help="forward-pass latency benchmark")
    p.add_argument("--specs", default="npc,gru,bigru,transformer")
    p.add_argument("--T", default="1000")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--dim", type=int, default=512)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--npc-receptive-field", type=int, default=19)
    p.add_argument("--npc-mask-size", type=int, default=5)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("analyze-kernels", help="masked-kernel magnitude profile")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_analyze_kernels)

    p = sub.add_parser("make-toy-corpus", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--speakers", type=int, default=8)
    p.add_argument("--sample-rate", type=int, default=8000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_make_toy_corpus)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliConfigError, ConfigError, TrainerError, bench_mod.BenchError,
            ProbeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    except (FileNotFoundError, feat_mod.FeatureError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ModelError, AutodiffError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
