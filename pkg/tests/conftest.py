import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_corpus():
    from ragmoe.corpus import CorpusSpec, generate_synthetic_corpus

    spec = CorpusSpec(
        n_cases=12,
        d=16,
        patches_min=8,
        patches_max=14,
        vocab_size=64,
        report_min=6,
        report_max=12,
        n_latent_topics=3,
        rng_seed=101,
        n_val=2,
        n_test=2,
    )
    return spec, generate_synthetic_corpus(spec)
