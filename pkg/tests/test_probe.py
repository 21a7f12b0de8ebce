import numpy as np
import pytest

from npc import probe as P


def gaussian_classes(rng, n_per_class, d=8, separation=6.0):
    X0 = rng.standard_normal((n_per_class, d))
    X1 = rng.standard_normal((n_per_class, d)) + separation / np.sqrt(d)
    X = np.vstack([X0, X1])
    y = np.concatenate([np.zeros(n_per_class, np.int64), np.ones(n_per_class, np.int64)])
    idx = rng.permutation(len(y))
    return X[idx], y[idx]


def test_separable_gaussians_low_error(rng):
    X, y = gaussian_classes(rng, 400)
    probe, info = P.fit_probe(X, y, seed=0, max_epochs=4000, patience=4000)
    X_test, y_test = gaussian_classes(np.random.default_rng(99), 400)
    assert P.evaluate(probe, X_test, y_test) <= 0.01


def test_shuffled_labels_give_chance_error(rng):
    X = rng.standard_normal((10_000, 6))
    y = rng.integers(0, 10, 10_000)
    probe, info = P.fit_probe(X, y, seed=1)
    err = P.evaluate(probe, X, y)
    assert abs(err - 0.9) <= 0.03


def test_single_class_raises(rng):
    X = rng.standard_normal((50, 4))
    y = np.zeros(50, np.int64)
    with pytest.raises(P.SingleClassError):
        P.fit_probe(X, y)


def test_evaluate_zero_on_fit_separable_train_set(rng):
    X, y = gaussian_classes(rng, 200, separation=10.0)
    probe, info = P.fit_probe(X, y, train_frac=1.0, seed=2, max_epochs=6000, patience=10_000)
    assert P.evaluate(probe, X, y) == 0.0


def test_constant_predictor_error_on_balanced_classes():
    C, n = 4, 100
    X = np.random.default_rng(5).standard_normal((C * n, 3))
    y = np.repeat(np.arange(C), n)
    probe = P.LinearProbe(weight=np.zeros((3, C)), bias=np.zeros(C))
    # all-zero scores: argmax ties resolve to class 0 for every sample
    assert P.evaluate(probe, X, y) == 1.0 - 1.0 / C


def test_error_rate_range_and_reproducibility(rng):
    X = rng.standard_normal((400, 5))
    y = rng.integers(0, 3, 400)
    p1, i1 = P.fit_probe(X, y, seed=7)
    p2, i2 = P.fit_probe(X, y, seed=7)
    assert np.array_equal(p1.weight, p2.weight)
    assert i1 == i2
    err = P.evaluate(p1, X, y)
    assert 0.0 <= err <= 1.0


def test_evaluate_dimension_mismatch(rng):
    probe = P.LinearProbe(weight=np.zeros((4, 2)), bias=np.zeros(2))
    with pytest.raises(P.ProbeError):
        P.evaluate(probe, rng.standard_normal((5, 3)), np.zeros(5, np.int64))


def test_framewise_dataset_length_checks(rng):
    reps = [rng.standard_normal((10, 4)), rng.standard_normal((8, 4))]
    labels = [np.zeros(10, np.int64), np.zeros(8, np.int64)]
    X, y = P.framewise_dataset(reps, labels)
    assert X.shape == (18, 4) and y.shape == (18,)
    with pytest.raises(P.ProbeError):
        P.framewise_dataset(reps, [np.zeros(9, np.int64), labels[1]])


def test_mean_pool_permutation_invariance(rng):
    r = rng.standard_normal((20, 6))
    shuffled = r[rng.permutation(20)]
    X1, y1, _ = P.utterance_dataset([r], ["spkA"])
    X2, y2, _ = P.utterance_dataset([shuffled], ["spkA"])
    assert np.allclose(X1, X2, atol=1e-12)


def test_utterance_dataset_speaker_encoding(rng):
    reps = [rng.standard_normal((5, 3)) for _ in range(4)]
    X, y, names = P.utterance_dataset(reps, ["b", "a", "b", "c"])
    assert names == ["a", "b", "c"]
    assert list(y) == [1, 0, 1, 2]
