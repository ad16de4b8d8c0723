import os

import numpy as np
import pytest

from mhubert.corpus import Manifest, Utterance
from mhubert.labeler import FeatureMatrix, feature_path, save_features

SAMPLE_RATE = 16000


def build_manifest(pairs: 'dict[tuple[str, str], int]',
                   seconds=4.0,
                   root: str = '/corpus',
                   ) -> Manifest:
    """A manifest with `count` utterances per (language, source) pair.

    `seconds` is a constant or a callable of the running utterance number.
    """
    utterances = []
    k = 0
    for (language, source), count in pairs.items():
        for i in range(count):
            duration = seconds(k) if callable(seconds) else seconds
            utterances.append(Utterance(id=f'{language}_{source}_{i:05d}',
                                        path=f'{language}/{source}/{i}.wav',
                                        language=language,
                                        source=source,
                                        num_samples=int(round(duration *
                                                              SAMPLE_RATE)),
                                        sample_rate=SAMPLE_RATE))
            k += 1
    return Manifest(root, tuple(utterances))


def write_feature_tree(m: Manifest,
                       features_dir: str,
                       dim: int,
                       seed: int = 0,
                       frame_rate_hz: float = 50.0,
                       ) -> 'list[str]':
    """Writes clustered random features for every utterance of a manifest."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=4.0, size=(8, dim))
    paths = []
    for u in m.utterances:
        frames = u.num_frames(frame_rate_hz)
        picks = rng.integers(0, len(centers), size=frames)
        values = centers[picks] + rng.normal(size=(frames, dim))
        path = feature_path(features_dir, u)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        save_features(path, FeatureMatrix(values))
        paths.append(path)
    return paths


@pytest.fixture
def manifest_factory():
    return build_manifest


@pytest.fixture
def small_manifest() -> Manifest:
    return build_manifest({('eng', 'cv'): 4, ('eng', 'vp'): 3,
                           ('fra', 'cv'): 3})
