import pytest

from demixkit.corpus import synth_corpus
from demixkit.embedding import compute_features


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """The 20-speaker, 8-utterance, 3 s synthetic corpus."""
    return synth_corpus(tmp_path_factory.mktemp("corpus"), n_speakers=20, utt_per_speaker=8, duration_s=3.0, seed=0)


@pytest.fixture(scope="session")
def small_features(small_corpus):
    return compute_features(small_corpus)
