import math

import numpy as np
import pytest

from core.errors import DegenerateSpectrumError
from core.spectral import alpha_hill, fix_finger_k, hill_estimate


def test_hill_closed_form():
    spectrum = [1.0, 1.0, 1.0, math.e, math.e**2]
    score = hill_estimate(spectrum, k=2)
    assert score.alpha == pytest.approx(1 + 2 / 3, abs=1e-12)
    assert score.k_used == 2


@pytest.mark.parametrize("alpha", [1.5, 2.0, 3.0])
def test_hill_recovers_power_law_exponent(alpha):
    n = 500
    quantiles = (np.arange(1, n + 1) - 0.5) / n
    spectrum = (1.0 - quantiles) ** (-1.0 / (alpha - 1.0))
    score = hill_estimate(spectrum)
    assert score.alpha == pytest.approx(alpha, abs=0.3)
    assert 2 <= score.k_used <= n - 1


@pytest.mark.parametrize(
    "spectrum",
    [[2.0, 2.0, 2.0], [3.0], [0.0, -1.0, 4.0]],
    ids=["all-equal", "single", "one-positive"],
)
def test_degenerate_spectra(spectrum):
    with pytest.raises(DegenerateSpectrumError):
        hill_estimate(spectrum)


def test_fix_finger_k_is_clamped():
    values = np.array([1.0, 1.0, 1.0, 1.0, 100.0])
    assert 2 <= fix_finger_k(values) <= 4


def test_alpha_hill_on_an_expert(make_model):
    expert = make_model(seed=2).moe_layer(0).experts[0]
    score = alpha_hill(expert)
    assert score.alpha > 1.0
    assert score.k_used >= 2
    assert alpha_hill(expert).alpha == score.alpha
