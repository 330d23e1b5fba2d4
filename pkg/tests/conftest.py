import numpy as np
import pytest

from uvface.fitting import standard_assets
from uvface.mesh import TemplateSpec, build_mean_template
from uvface.uvmap import build_weight_mask, compute_uv_mapping


@pytest.fixture(scope="session")
def template64():
    return build_mean_template(TemplateSpec(rows=64, cols=64))


@pytest.fixture(scope="session")
def mapping256(template64):
    return compute_uv_mapping(template64, (256, 256))


@pytest.fixture(scope="session")
def weight_mask256(template64, mapping256):
    return build_weight_mask(mapping256, template64.regions, template64.landmark_indices)


@pytest.fixture(scope="session")
def fit_assets():
    """Desk-scale template/mapping/mask/edges used by the fitting tests."""
    return standard_assets(rows=32, cols=32, uv_resolution=(64, 64))


@pytest.fixture(scope="session")
def toy_quad():
    """Four-vertex face: Y in {0, 1}, X/Z in {-1, 1}, two facets."""
    vertices = np.array(
        [[-1.0, 0.0, 1.0], [1.0, 0.0, 1.0], [-1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]
    )
    facets = np.array([[0, 1, 2], [2, 1, 3]])
    return vertices, facets


def random_rotation(rng):
    """Uniform-ish proper rotation from a QR factorization."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
