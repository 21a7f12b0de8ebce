import os

import numpy as np
import pytest

from npc.cli import main
from npc.model import NpcModel, NpcConfig, load_checkpoint, save_checkpoint


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("clicorpus")
    assert run(["make-toy-corpus", "--out", str(out), "--n", "12",
                "--speakers", "3", "--seed", "5"]) == 0
    return out


@pytest.fixture(scope="module")
def train_dir(tmp_path_factory, corpus_dir):
    out = tmp_path_factory.mktemp("clitrain")
    cfg = out / "cfg.txt"
    cfg.write_text(
        f"manifest={corpus_dir}/manifest.tsv\n"
        f"out_dir={out}/run\n"
        "layers=2\nreceptive_field=13\nmask_size=3\n"
        "dim=16\nn_mels=20\nvq_groups=2\nvq_codewords=8\n"
        "epochs=2\nbatch_size=4\nseed=3\n",
        encoding="utf-8")
    assert run(["train", "--config", str(cfg)]) == 0
    return out


def test_make_toy_corpus_outputs(corpus_dir):
    assert (corpus_dir / "manifest.tsv").exists()
    assert (corpus_dir / "utt0000.wav").exists()
    assert (corpus_dir / "utt0011.labels").exists()


def test_train_writes_artifacts(train_dir):
    assert (train_dir / "run" / "checkpoint.npck").exists()
    assert (train_dir / "run" / "train_log.csv").exists()
    assert (train_dir / "run" / "config.resolved").exists()


def test_train_missing_manifest_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.txt"
    cfg.write_text("manifest=does_not_exist.tsv\nout_dir=o\n"
                   "layers=2\nreceptive_field=13\nmask_size=3\n", encoding="utf-8")
    assert run(["train", "--config", str(cfg)]) == 2
    assert "does_not_exist.tsv" in capsys.readouterr().err


def test_train_infeasible_plan_exit_1(tmp_path, corpus_dir, capsys):
    cfg = tmp_path / "inf.txt"
    cfg.write_text(
        f"manifest={corpus_dir}/manifest.tsv\nout_dir={tmp_path}/run\n"
        "layers=3\nreceptive_field=13\nmask_size=5\n", encoding="utf-8")
    assert run(["train", "--config", str(cfg)]) == 1
    assert "(R - 2L - 1)/2 > (M_in - 1)/2 + L" in capsys.readouterr().err


def test_train_determinism_same_seed(tmp_path, corpus_dir):
    outs = []
    for name in ("r1", "r2"):
        cfg = tmp_path / f"{name}.txt"
        cfg.write_text(
            f"manifest={corpus_dir}/manifest.tsv\nout_dir={tmp_path}/{name}\n"
            "layers=1\nreceptive_field=9\nmask_size=1\n"
            "dim=8\nn_mels=12\nvq_groups=2\nvq_codewords=4\n"
            "epochs=1\nbatch_size=4\nseed=17\n", encoding="utf-8")
        assert run(["train", "--config", str(cfg)]) == 0
        outs.append((tmp_path / name / "checkpoint.npck").read_bytes())
    assert outs[0] == outs[1]


def test_extract_writes_one_file_per_utterance(tmp_path, corpus_dir, train_dir):
    out = tmp_path / "reps"
    ck = str(train_dir / "run" / "checkpoint.npck")
    assert run(["extract", "--checkpoint", ck,
                "--manifest", f"{corpus_dir}/manifest.tsv",
                "--out", str(out)]) == 0
    files = sorted(os.listdir(out))
    assert len(files) == 12
    first = (out / files[0]).read_bytes()
    assert run(["extract", "--checkpoint", ck,
                "--manifest", f"{corpus_dir}/manifest.tsv",
                "--out", str(out)]) == 0
    assert (out / files[0]).read_bytes() == first      # rerun is byte-identical


def test_extract_corrupt_checkpoint_exit_2(tmp_path, corpus_dir, train_dir, capsys):
    ck = train_dir / "run" / "checkpoint.npck"
    blob = bytearray(ck.read_bytes())
    blob[50] ^= 0xFF
    bad = tmp_path / "bad.npck"
    bad.write_bytes(bytes(blob))
    assert run(["extract", "--checkpoint", str(bad),
                "--manifest", f"{corpus_dir}/manifest.tsv",
                "--out", str(tmp_path / "r")]) == 2
    assert "checksum" in capsys.readouterr().err.lower()


def test_audit_fresh_model_passes(tmp_path):
    assert run(["audit", "--layers", "2", "--receptive-field", "17",
                "--mask-size", "5", "--dim", "16", "--d-in", "8",
                "--pairs", "6", "--rf-probes", "1",
                "--out", str(tmp_path / "audit.csv")]) == 0
    lines = (tmp_path / "audit.csv").read_text().strip().split("\n")
    assert lines[0] == "check,t,max_delta_masked,ok"
    assert len(lines) == 8


def test_audit_corrupted_checkpoint_fails(tmp_path, capsys):
    model = NpcModel.init(NpcConfig(layers=2, receptive_field=13, mask_size=3,
                                    d=8, d_in=6, vq_groups=2, vq_codewords=4), seed=0)
    w = model.params["layer1.masked.w"]
    w.data[model.plan.mask(1) == 0] = 0.01      # violate the zero-mask invariant
    path = str(tmp_path / "corrupt.npck")
    save_checkpoint(model, path)
    assert run(["audit", "--checkpoint", path, "--pairs", "2",
                "--rf-probes", "0"]) == 4
    assert "nonzero weights at masked taps" in capsys.readouterr().err


def test_probe_end_to_end(tmp_path, corpus_dir, train_dir):
    reps = tmp_path / "reps"
    ck = str(train_dir / "run" / "checkpoint.npck")
    assert run(["extract", "--checkpoint", ck,
                "--manifest", f"{corpus_dir}/manifest.tsv",
                "--out", str(reps)]) == 0
    out_csv = tmp_path / "probe.csv"
    assert run(["probe", "--manifest", f"{corpus_dir}/manifest.tsv",
                "--reps-dir", str(reps), "--tasks", "phone",
                "--out", str(out_csv)]) == 0
    lines = out_csv.read_text().strip().split("\n")
    assert lines[0] == "task,representation,train_err,valid_err,test_err,seed"
    task, rep, tr, va, te, seed = lines[1].split(",")
    assert task == "phone" and rep == "npc"
    assert 0.0 <= float(te) <= 1.0


def test_bench_scaling_csv_rows(tmp_path):
    out = tmp_path / "bench.csv"
    assert run(["bench", "--specs", "npc,gru", "--T", "16,32,48,64",
                "--batch", "1", "--dim", "16", "--layers", "1",
                "--npc-receptive-field", "9", "--npc-mask-size", "1",
                "--reps", "10", "--threads", "1", "--out", str(out)]) == 0
    lines = out.read_text().strip().split("\n")
    assert len(lines) == 1 + 2 * 4      # header + 4 rows per spec


def test_analyze_kernels(tmp_path, train_dir):
    out = tmp_path / "mag.csv"
    assert run(["analyze-kernels",
                "--checkpoint", str(train_dir / "run" / "checkpoint.npck"),
                "--out", str(out)]) == 0
    lines = out.read_text().strip().split("\n")
    assert lines[0] == "layer,offset,magnitude"
    mags = np.array([float(l.split(",")[2]) for l in lines[1:]])
    assert mags.sum() == pytest.approx(2.0, abs=1e-5)   # two layers, each sums to 1
