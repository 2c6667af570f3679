"""Shared fixtures: tiny datasets, random embedding batches, quiet logs."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # makes `import oracles` work

from xmml.losses import EmbeddingSet, LossWeights
from xmml.numerics import derive_rng
from xmml.synthdata import GeneratorConfig, generate_dataset

FIXTURES = Path(__file__).parent / "fixtures"

# the self-fusion fallback warning is expected noise in deliberately tiny cases
logging.getLogger("xmml.losses").setLevel(logging.ERROR)


TINY_GEN = GeneratorConfig(
    n_identities_train=4, n_identities_test=3,
    samples_per_identity_per_modality=2,
    d_id=6, d_view=2, d_conflict=2, seed=0)


@pytest.fixture(scope="session")
def tiny_bundle():
    """4+3 identities, 2 samples each per modality, 10-dim features."""
    return generate_dataset(TINY_GEN)


@pytest.fixture(scope="session")
def default_bundle():
    """The full default generator output (32+16 identities)."""
    return generate_dataset(GeneratorConfig())


def random_embedding_set(n: int, d: int, seed: int, n_labels: int | None = None
                         ) -> EmbeddingSet:
    rng = derive_rng(seed, "test-emb")
    if n_labels is None:
        n_labels = max(1, n // 2)
    labels = np.arange(n) % n_labels
    return EmbeddingSet(
        f_v=rng.standard_normal((n, d)), f_r=rng.standard_normal((n, d)),
        t_v=rng.standard_normal((n, d)), t_r=rng.standard_normal((n, d)),
        labels=labels)


@pytest.fixture
def emb_4x3() -> EmbeddingSet:
    """4 rows, 3 dims, labels [0,1,0,1]."""
    return random_embedding_set(4, 3, seed=7, n_labels=2)


@pytest.fixture
def default_weights() -> LossWeights:
    return LossWeights()
