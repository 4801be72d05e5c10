import logging

import pytest

from istr.corpus import synthesize_corpus


@pytest.fixture(scope="session")
def small_corpus():
    """12 train-pool + 4 test-pool scenes (twins attached) and 16 text-free scenes, 64x64."""
    logging.getLogger("istr.corpus").setLevel(logging.ERROR)
    return synthesize_corpus(12, 4, canvas=(64, 64), seed=3, words_per_image=(1, 2))
