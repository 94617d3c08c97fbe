import numpy as np
import pytest

from enstrophy_lab.fields import SpectralField

try:
    from hypothesis import settings

    settings.register_profile("ci", derandomize=True, max_examples=25, deadline=None)
    settings.load_profile("ci")
except ImportError:
    pass


def white_field(cutoff: int, rng: np.random.Generator, scale: float | None = None) -> SpectralField:
    """Random real field; unit coefficient variance, optional H^0 rescale."""
    d = 2 * cutoff + 1
    c = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    c = (c + np.conj(c[::-1, ::-1])) / 2 * np.sqrt(2.0)
    c[cutoff, cutoff] = rng.standard_normal()
    if scale is not None:
        c *= scale / np.sqrt(np.sum(np.abs(c) ** 2))
    return SpectralField(cutoff, c)


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
