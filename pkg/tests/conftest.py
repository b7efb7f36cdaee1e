import numpy as np
import pytest

from sidkit.catalog import ItemCatalog, ItemRecord, SidStructure


@pytest.fixture
def tiny_structure() -> SidStructure:
    return SidStructure((4, 4, 4), code_dim=4)


@pytest.fixture
def flat_structure() -> SidStructure:
    return SidStructure((8192, 8192, 8192), code_dim=64)


def clustered_catalog(
    n_items: int,
    n_clusters: int,
    d_in: int,
    seed: int,
    center_scale: float = 10.0,
    noise: float = 0.3,
) -> tuple[ItemCatalog, np.ndarray]:
    """Well-separated Gaussian clusters with in-cluster companion links."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_clusters, d_in)) * center_scale
    labels = np.concatenate(
        [np.arange(n_clusters), rng.integers(n_clusters, size=n_items - n_clusters)]
    )
    ids = [f"item{i:05d}" for i in range(n_items)]
    members: dict[int, list[int]] = {}
    for i, c in enumerate(labels):
        members.setdefault(int(c), []).append(i)
    related = {}
    for rows in members.values():
        for pos, i in enumerate(rows):
            related[i] = ids[rows[(pos + 1) % len(rows)]] if len(rows) > 1 else None
    records = [
        ItemRecord(
            item_id=ids[i],
            embedding=centers[int(labels[i])] + rng.standard_normal(d_in) * noise,
            related_item=related[i],
        )
        for i in range(n_items)
    ]
    return ItemCatalog(records, d_in=d_in), labels
