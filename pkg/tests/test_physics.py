import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tlsurrogate import physics


def test_thorp_examples():
    assert physics.thorp_alpha(0.0) == pytest.approx(0.003, abs=1e-15)
    assert physics.thorp_alpha(1.0) == pytest.approx(0.0690041, abs=1e-6)
    # four terms at 8 kHz, evaluated in extended precision
    assert physics.thorp_alpha(8.0) == pytest.approx(0.8051805069, abs=1e-6)


def test_thorp_increasing():
    f = np.linspace(1e-3, 20.0, 20001)
    assert np.all(np.diff(physics.thorp_alpha(f)) > 0)


def test_spreading_examples():
    assert physics.spreading_db(1.0) == 0.0
    assert physics.spreading_db(1000.0) == pytest.approx(60.0)
    assert physics.spreading_db(1000.0, A=10.0) == pytest.approx(30.0)


def test_physics_mean_examples():
    p = physics.PhysicsMeanParams()
    assert physics.physics_mean_tl(1.0, 1.0, p) == pytest.approx(physics.thorp_alpha(1.0) / 1000.0)
    assert physics.physics_mean_tl(1000.0, 1.0, p) == pytest.approx(60.0690, abs=1e-4)
    assert physics.physics_mean_tl(100_000.0, 1.0, p) == pytest.approx(106.900409, abs=1e-3)


def test_physics_mean_increasing_in_range():
    R = np.geomspace(1.0, 2e5, 5000)
    for f in (0.0125, 1.0, 8.0):
        assert np.all(np.diff(physics.physics_mean_tl(R, f)) > 0)


def test_jomopans_examples():
    f_ref = 480.0 / 13.9
    # extended-precision evaluation of the formula at its resonance point: 159.71143
    assert physics.jomopans_echo_sl(f_ref, 13.9, 100.0) == pytest.approx(159.713, abs=0.01)
    assert physics.jomopans_echo_sl(f_ref, 13.9, 100.0) == pytest.approx(159.7114303, abs=1e-6)
    assert physics.jomopans_echo_sl(400.0, 20.0, 100.0) - physics.jomopans_echo_sl(400.0, 10.0, 100.0) == \
        pytest.approx(18.061799739838872, abs=1e-12)


def test_jomopans_length_reference_term():
    a = physics.jomopans_echo_sl(400.0, 10.0, 100.0)
    b = physics.jomopans_echo_sl(400.0, 10.0, 200.0)
    assert b - a == pytest.approx(20 * np.log10(2.0), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(12.5, 8000), st.floats(1, 30), st.floats(1, 30), st.floats(10, 400))
def test_jomopans_speed_law(f, v, v2, L):
    diff = physics.jomopans_echo_sl(f, v, L) - physics.jomopans_echo_sl(f, v2, L)
    assert diff == pytest.approx(60 * (np.log10(v) - np.log10(v2)), abs=1e-9)


def test_outputs_finite_in_envelope():
    f = np.geomspace(12.5, 8000, 50)[:, None, None]
    V = np.linspace(1, 30, 30)[None, :, None]
    R = np.geomspace(1, 2e5, 40)[None, None, :]
    assert np.all(np.isfinite(physics.jomopans_echo_sl(f, V, 200.0)))
    assert np.all(np.isfinite(physics.physics_mean_tl(R, f / 1000.0)))


def test_source_spec_validation():
    with pytest.raises(ValueError):
        physics.SourceSpec(vessel_length_m=0.0)
