"""Shared fixtures: a small synthetic speaker corpus and scenes built from it."""

import pytest

from revex.acoustics import RirCache
from revex.corpus import synthesize_corpus
from revex.dataset import build_scene


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Three synthetic speakers with three utterances each, 2.5 to 3.5 s long."""
    return synthesize_corpus(tmp_path_factory.mktemp("corpus"), n_speakers=3, n_utterances=3, seed=1, duration=(2.5, 3.5))


@pytest.fixture(scope="session")
def speech(corpus):
    """One synthetic utterance."""
    speaker = corpus.speaker_ids[0]
    return corpus.load(corpus.utterances(speaker)[0])


@pytest.fixture(scope="session")
def rir_cache(tmp_path_factory):
    return RirCache(tmp_path_factory.mktemp("rirs"))


@pytest.fixture(scope="session")
def scenes(corpus, rir_cache):
    """Four scenes, ids scene_0 .. scene_3."""
    return [build_scene(corpus, seed, rir_cache=rir_cache, scene_id=f"scene_{seed}") for seed in range(4)]
