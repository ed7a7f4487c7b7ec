import numpy as np
import pytest
from hypothesis import given, strategies as st

from gpiqc import gp
from gpiqc.sector import (FunctionBand, SectorBounds, SectorError, extract_sector, scan_sector,
                          split_delta)


def test_linear_band_exact():
    band = FunctionBand(lambda x: 0.3 * x, lambda x: 0.3 * x)
    sb = extract_sector(band, -1, 1, 2001, 0.0, 1e-2)
    assert sb.kappa1 == pytest.approx(0.3, abs=1e-9)
    assert sb.kappa2 == pytest.approx(0.3, abs=1e-9)


def test_constant_band_edge_of_exclusion():
    c, rho = 0.02, 0.05
    band = FunctionBand(lambda x: -c + 0 * x, lambda x: c + 0 * x)
    sb = extract_sector(band, -1, 1, 2001, 0.0, rho)
    assert sb.kappa1 == pytest.approx(-c / rho)
    assert sb.kappa2 == pytest.approx(c / rho)


def test_lipschitz_inflation_only_widens():
    band = FunctionBand(lambda x: 0.2 * x - 0.01, lambda x: 0.2 * x + 0.01)
    tight = extract_sector(band, -1, 1, 201, 0.0, 0.05)
    loose = extract_sector(band, -1, 1, 201, 1.0, 0.05)
    assert loose.contains(tight)


def test_lipschitz_envelope_is_sound():
    # a wiggly function that a coarse grid alone would miss
    f = lambda x: 0.1 * x + 0.02 * np.sin(60 * x)
    slope = 0.1 + 0.02 * 60
    true = scan_sector(f, -1, 1)
    band = FunctionBand(f, f)
    sb = extract_sector(band, -1, 1, 41, slope, 0.05)
    x = np.linspace(0.05, 1, 100_001)
    x = np.concatenate([-x, x])
    r = f(x) / x
    assert sb.kappa1 <= r.min() and sb.kappa2 >= r.max()
    assert true.kappa2 >= r.max() - 1e-9


@given(st.floats(0.0, 0.2), st.floats(0.0, 0.2), st.floats(-0.5, 0.5))
def test_monotone_in_band(w1, w2, slope):
    inner = FunctionBand(lambda x: slope * x - w1, lambda x: slope * x + w1)
    outer = FunctionBand(lambda x: slope * x - w1 - w2, lambda x: slope * x + w1 + w2)
    a = extract_sector(inner, -1, 1, 301, 0.0, 0.05)
    b = extract_sector(outer, -1, 1, 301, 0.0, 0.05)
    assert b.kappa1 <= a.kappa1 + 1e-12 and a.kappa2 <= b.kappa2 + 1e-12


@given(st.integers(0, 10_000))
def test_contains_true_sector_when_band_contains_function(seed):
    rng = np.random.default_rng(seed)
    k0 = gp.kernel_zero_at_origin(gp.kernel_se(0.5, 0.5))
    f, _ = gp.rkhs_function(k0, rng.uniform(-1, 1, 5), rng.standard_normal(5))
    band = FunctionBand(lambda x: f(x) - 0.01 * np.abs(x), lambda x: f(x) + 0.01 * np.abs(x))
    # band slope: |f'| + 0.01; bound f' crudely by finite differences with margin
    xs = np.linspace(-1, 1, 20001)
    L = 1.5 * np.max(np.abs(np.diff(f(xs)))) / (xs[1] - xs[0]) + 0.01
    sb = extract_sector(band, -1, 1, 401, L, 1e-2)
    x = np.linspace(-1, 1, 100_001)
    x = x[np.abs(x) >= 1e-2]
    r = f(x) / x
    assert sb.kappa1 <= r.min() + 1e-12 and r.max() <= sb.kappa2 + 1e-12


def test_grid_refinement_does_not_widen():
    f = lambda x: 0.25 * x + 0.05 * x ** 2
    band = FunctionBand(f, f)
    coarse = extract_sector(band, -1, 1, 501, 0.0, 0.02)
    fine = extract_sector(band, -1, 1, 1001, 0.0, 0.02)
    assert coarse.kappa1 <= fine.kappa1 + 1e-9
    assert fine.kappa2 <= coarse.kappa2 + 1e-9


def test_gp_band_contains_truth():
    rng = np.random.default_rng(3)
    k0 = gp.kernel_zero_at_origin(gp.kernel_se(0.5, 0.5))
    f, nrm = gp.rkhs_function(k0, rng.uniform(-1, 1, 8), rng.standard_normal(8))
    data = gp.sample_dataset(f, 60, rng, 0.05, 0.05, 0.05)
    post = gp.fit(k0, data, 2 * nrm, 0.001)
    from gpiqc.sector import edge_slope
    sb = extract_sector(post, -1, 1, 2001, 1.5 * edge_slope(post), 1e-2)
    assert sb.contains(scan_sector(f))


class TestErrors:
    band = FunctionBand(lambda x: x, lambda x: x)

    @pytest.mark.parametrize("kw", [dict(a=0.0), dict(grid_points=2), dict(lipschitz=-1.0),
                                    dict(exclusion_radius=1.0), dict(exclusion_radius=0.0)])
    def test_bad_arguments(self, kw):
        args = dict(a=-1.0, b=1.0, grid_points=101, lipschitz=0.0, exclusion_radius=0.01)
        args.update(kw)
        with pytest.raises(SectorError):
            extract_sector(self.band, **args)

    def test_band_failure(self):
        def boom(x):
            raise RuntimeError("no")
        with pytest.raises(SectorError):
            extract_sector(FunctionBand(boom, boom))
        with pytest.raises(SectorError):
            extract_sector(FunctionBand(lambda x: np.nan * x, lambda x: x))


class TestBounds:
    def test_order(self):
        with pytest.raises(SectorError):
            SectorBounds(0.5, 0.1)

    def test_sign_flag(self):
        assert SectorBounds(-0.1, 0.2).sign_ok
        assert not SectorBounds(0.1, 0.2).sign_ok
        assert SectorBounds(0.0, 0.0).sign_ok

    def test_roundtrip(self):
        s = SectorBounds(-0.2, 0.5, (-1.0, 1.0), 0.001, 2001, 0.01, 3.0)
        assert SectorBounds.from_dict(s.to_dict()) == s


class TestSplitDelta:
    def test_examples(self):
        assert split_delta(0.001, 2, True) == [0.001]
        assert split_delta(0.01, 2, False) == [0.005, 0.005]
        assert split_delta(0.3, 1, False) == [0.3]

    @given(st.floats(1e-6, 0.999), st.integers(1, 10))
    def test_union_bound(self, d, n):
        assert sum(split_delta(d, n, False)) == pytest.approx(d)

    def test_errors(self):
        with pytest.raises(SectorError):
            split_delta(1.0, 2, True)
        with pytest.raises(SectorError):
            split_delta(0.1, 0, True)
