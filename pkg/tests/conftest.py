import random

import pytest

from morphnas.graph import ArchGraph, default_cnn
from morphnas.morph import sample_children


def random_morphed_graph(
    rng: random.Random,
    max_ops: int = 6,
    base: ArchGraph | None = None,
    input_shape=(8, 8, 3),
    num_classes: int = 5,
) -> ArchGraph:
    """A graph reached by a random morph walk from the default architecture."""
    g = base if base is not None else default_cnn(input_shape, num_classes)
    for _ in range(rng.randrange(max_ops + 1)):
        children = sample_children(g, rng, 1)
        if not children:
            break
        g = children[0][1]
    return g


def graph_pool(seed: int, count: int, max_ops: int = 6) -> list[ArchGraph]:
    rng = random.Random(seed)
    return [random_morphed_graph(rng, max_ops) for _ in range(count)]


@pytest.fixture(scope="session")
def small_default():
    return default_cnn((8, 8, 3), 5)


@pytest.fixture(scope="session")
def default32():
    return default_cnn((32, 32, 3), 10)
