import numpy as np
import pytest

from npc.cli import load_corpus
from npc.features import FrameParams
from npc.toydata import ToyCorpusConfig, make_toy_corpus


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    """Small synthetic corpus shared by unit tests (not the acceptance corpus)."""
    out = tmp_path_factory.mktemp("toysmall")
    make_toy_corpus(str(out), ToyCorpusConfig(n_utterances=16, n_speakers=4, seed=123))
    return out


@pytest.fixture(scope="session")
def small_corpus(small_corpus_dir):
    entries, feats = load_corpus(str(small_corpus_dir / "manifest.tsv"),
                                 FrameParams(), "utterance")
    return entries, feats


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
