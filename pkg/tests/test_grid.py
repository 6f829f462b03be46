import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bihscat.exceptions import GridMismatch, NyquistViolation
from bihscat.grid import (Field, GridSpec, SpectralMultiplier, apply_multiplier,
                          circle_directions, complex_field, nudft, nudft_point, read_field,
                          real_field, spectral_transform, sphere_directions, write_field)


def test_gridspec_invariants():
    g = GridSpec(2, 16, 2.0)
    assert g.spacing == 0.25
    assert g.cell_volume == 0.25 ** 2
    assert g.axis()[0] == -2.0 and g.axis()[8] == 0.0
    for bad in [(2, 4, 1.0), (2, 12, 1.0), (4, 16, 1.0), (2, 16, 0.0)]:
        with pytest.raises(ValueError):
            GridSpec(*bad)


def test_field_size_checked():
    g = GridSpec(2, 8, 1.0)
    with pytest.raises(GridMismatch):
        Field(g, np.zeros(63))
    f = real_field(g, np.zeros(64))
    assert f.is_real and f.values.shape == (8, 8)
    assert not complex_field(g, np.zeros(64)).is_real


def test_delta_has_constant_spectrum():
    g = GridSpec(2, 8, 1.0)
    v = np.zeros(g.shape)
    v[4, 4] = 1.0  # origin node
    spec = spectral_transform(real_field(g, v)).values
    np.testing.assert_allclose(spec, 1.0, atol=1e-14)


def test_constant_field_spectrum_at_zero_only():
    g = GridSpec(2, 16, 1.0)
    spec = spectral_transform(real_field(g, np.ones(g.shape))).values
    assert abs(spec[0, 0] - g.size) < 1e-10
    spec[0, 0] = 0
    assert np.max(np.abs(spec)) < 1e-10


@settings(max_examples=20, deadline=None)
@given(dim=st.sampled_from([2, 3]), log_n=st.integers(3, 5), seed=st.integers(0, 2 ** 32 - 1))
def test_round_trip(dim, log_n, seed):
    g = GridSpec(dim, 2 ** log_n, 1.5)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(g.shape) + 1j * rng.standard_normal(g.shape)
    back = spectral_transform(spectral_transform(complex_field(g, v)), "inverse").values
    assert np.max(np.abs(back - v)) < 1e-12 * np.max(np.abs(v)) * 10


def test_nudft_matches_dft_coefficient():
    g = GridSpec(2, 32, 3.0)
    rng = np.random.default_rng(1)
    f = real_field(g, rng.standard_normal(g.shape))
    spec = spectral_transform(f).values
    w = g.freq_axis()
    for q in [(1, 0), (3, 5), (-4, 7), (10, -9)]:
        xi = (w[q[0]], w[q[1]])
        ref = g.cell_volume * spec[q]
        assert abs(nudft_point(f, xi) - ref) < 1e-10 * abs(ref)


def test_nudft_gaussian_closed_form():
    g = GridSpec(2, 256, 8.0)
    f = real_field(g, np.exp(-0.5 * g.radius() ** 2))
    val = nudft_point(f, (1.0, 0.0))
    assert abs(val - 2 * np.pi * np.exp(-0.5)) < 1e-6


def test_nudft_indicator_sinc_product():
    g = GridSpec(2, 256, 4.0)
    x, y = g.coords()
    h = g.spacing
    f = real_field(g, ((np.abs(x) <= 1) & (np.abs(y) <= 1)).astype(float))

    def sinc_integral(xi):
        return 2.0 if xi == 0 else 2 * np.sin(xi) / xi

    for xi in [(np.pi, 0.0), (np.pi / 2, 0.0), (1.0, 2.0)]:
        exact = sinc_integral(xi[0]) * sinc_integral(xi[1])
        # endpoint nodes carry full weight: O(h) quadrature error
        assert abs(nudft_point(f, xi) - exact) < 4 * h


def test_nudft_zero_field_and_nyquist():
    g = GridSpec(2, 16, 1.0)
    assert nudft_point(real_field(g, np.zeros(g.shape)), (3.0, 1.0)) == 0
    with pytest.raises(NyquistViolation):
        nudft(np.ones(g.shape), g, np.array([[g.nyquist, 0.0]]))


def test_nudft_batch_equals_loop():
    g = GridSpec(2, 32, 2.0)
    rng = np.random.default_rng(3)
    vals = np.zeros((3,) + g.shape)
    vals[:, 10:20, 8:25] = rng.standard_normal((3, 10, 17))
    xis = rng.uniform(-10, 10, (7, 2))
    batch = nudft(vals, g, xis)
    for b in range(3):
        for p in range(7):
            ref = g.cell_volume * np.sum(vals[b] * np.exp(-1j * (xis[p, 0] * g.coords()[0]
                                                                + xis[p, 1] * g.coords()[1])))
            assert abs(batch[b, p] - ref) < 1e-12 * max(1, abs(ref))


def test_identity_and_zero_multiplier():
    g = GridSpec(2, 16, 1.0)
    rng = np.random.default_rng(0)
    f = real_field(g, rng.standard_normal(g.shape))
    out = apply_multiplier(f, SpectralMultiplier.identity()).values
    assert np.max(np.abs(out - f.values)) < 1e-14
    zero = SpectralMultiplier(lambda ks: np.zeros(np.broadcast_shapes(*(k.shape for k in ks))))
    assert not np.any(apply_multiplier(f, zero).values)


def test_inverse_magnitude_multiplier_on_delta():
    g = GridSpec(2, 16, 1.0)
    v = np.zeros(g.shape)
    v[8, 8] = 1.0
    out = apply_multiplier(real_field(g, v), SpectralMultiplier.power(-1.0, zero_mode=0.0))
    spec = spectral_transform(out).values
    mag = g.freq_magnitude()
    expect = np.where(mag > 0, 1.0 / np.where(mag > 0, mag, 1), 0.0)
    np.testing.assert_allclose(spec, expect, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), seed=st.integers(0, 1000))
def test_multiplier_linear(a, b, seed):
    g = GridSpec(2, 16, 1.0)
    rng = np.random.default_rng(seed)
    f, h = (real_field(g, rng.standard_normal(g.shape)) for _ in range(2))
    M = SpectralMultiplier.power(-1.5)
    lhs = apply_multiplier(real_field(g, a * f.values + b * h.values), M).values
    rhs = a * apply_multiplier(f, M).values + b * apply_multiplier(h, M).values
    assert np.max(np.abs(lhs - rhs)) < 1e-12 * (1 + np.max(np.abs(rhs)))


def test_multiplier_grid_mismatch():
    M = SpectralMultiplier.power(-1.0, grid=GridSpec(2, 16, 1.0))
    with pytest.raises(GridMismatch):
        apply_multiplier(real_field(GridSpec(2, 8, 1.0), np.zeros(64)), M)


@pytest.mark.parametrize("dtype", [np.float64, np.complex128])
def test_field_file_round_trip(tmp_path, dtype):
    g = GridSpec(3, 8, 1.25)
    rng = np.random.default_rng(5)
    v = rng.standard_normal(g.shape).astype(dtype)
    if dtype is np.complex128:
        v = v + 1j * rng.standard_normal(g.shape)
    js, bn = write_field(tmp_path / "f", Field(g, v))
    meta = json.loads(js.read_text())
    assert meta == {"dim": 3, "n_per_axis": 8, "half_width": 1.25, "order": "row-major",
                    "dtype": "f64" if dtype is np.float64 else "c128"}
    assert bn.stat().st_size == v.nbytes
    back = read_field(tmp_path / "f")
    assert back.grid == g and back.values.tobytes() == v.tobytes()


def test_direction_sets():
    d2, w2 = circle_directions(12)
    assert np.allclose(np.linalg.norm(d2, axis=1), 1) and abs(w2.sum() - 2 * np.pi) < 1e-12
    d3, w3 = sphere_directions(4)
    assert np.allclose(np.linalg.norm(d3, axis=1), 1) and abs(w3.sum() - 4 * np.pi) < 1e-12
    # exact for quadratic polynomials
    assert abs(np.sum(w3 * d3[:, 2] ** 2) - 4 * np.pi / 3) < 1e-12
