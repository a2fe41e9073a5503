import pytest
from hypothesis import settings

from flow4d import synth

settings.register_profile("suite", deadline=None, max_examples=50)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def tube_gt():
    """Small steady tube used across unit tests."""
    return synth.analytic_poiseuille((20, 20, 24), (1.0, 1.0, 1.0), radius=6,
                                     axis=2, v_peak=70.0, n_frames=4)


@pytest.fixture(scope="session")
def tube_bundle_clean(tube_gt):
    return synth.synthesize_signal(tube_gt, venc=tube_gt.v_max)


@pytest.fixture(scope="session")
def tube_bundle_snr10(tube_gt):
    clean = synth.apply_psf(synth.synthesize_signal(tube_gt, venc=tube_gt.v_max))
    return synth.add_noise(clean, snr=10.0, seed=7)
