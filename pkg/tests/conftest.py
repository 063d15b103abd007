import numpy as np
import pytest

from pairfuse import models


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_config():
    """2 stages, 8x8 inputs: small enough for exhaustive finite differences."""
    return models.ModelConfig(
        in_channels=3,
        input_size=8,
        stage_widths=(4, 6),
        post_widths=(6,),
        mlp_widths=(8, 4),
        num_classes=4,
    )


def fd_gradient(loss_fn, arr: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. every array element."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        lp = loss_fn()
        flat[i] = orig - step
        lm = loss_fn()
        flat[i] = orig
        gflat[i] = (lp - lm) / (2 * step)
    return grad


def assert_close_grad(analytic, numeric, rtol, atol=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    bad = np.abs(analytic - numeric) > rtol * denom + atol
    assert not bad.any(), (
        f"{bad.sum()} of {bad.size} gradient entries off; worst "
        f"analytic={analytic[bad].ravel()[0]} numeric={numeric[bad].ravel()[0]}"
    )
