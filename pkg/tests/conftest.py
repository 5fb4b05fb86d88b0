import numpy as np
import pytest

from semmap.field import FieldParams, HashGridConfig


@pytest.fixture
def tiny_grid():
    return HashGridConfig(
        num_levels=3, table_size=2**8, base_resolution=4, growth_factor=1.5
    )


@pytest.fixture
def tiny_params(tiny_grid):
    return FieldParams.init(tiny_grid, seed=0, hidden_dim=8, geom_feat_dim=5)


@pytest.fixture
def tiny_params64(tiny_grid):
    return FieldParams.init(
        tiny_grid, seed=0, hidden_dim=8, geom_feat_dim=5, dtype=np.float64
    )
