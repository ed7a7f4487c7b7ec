import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_stable
from gpiqc import lmi, lti
from gpiqc.lti import StateSpace


def test_min_scalar():
    prob = lmi.LmiProblem()
    g = prob.scalar("g")
    prob.require_nsd(1.0 - g)
    prob.minimize(g)
    sol = lmi.solve(prob)
    assert sol.status == lmi.OPTIMAL
    assert sol["g"] == pytest.approx(1.0, abs=1e-6)


def test_lyapunov():
    prob = lmi.LmiProblem()
    X = prob.symmetric("X", 3)
    A = -np.eye(3)
    prob.require_psd(X, None)
    prob.require_nsd(A.T @ X + X @ A, None)
    sol = lmi.solve(prob)
    assert sol.status == lmi.FEASIBLE
    assert np.linalg.eigvalsh(sol["X"])[0] > 0


def test_infeasible():
    prob = lmi.LmiProblem()
    X = prob.symmetric("X", 2)
    prob.require_psd(X, 1.0)
    prob.require_nsd(X, 1.0)
    assert lmi.solve(prob).status == lmi.INFEASIBLE


@pytest.mark.parametrize("gamma,ok", [(1.01, True), (0.99, False)])
def test_brl_first_order(gamma, ok):
    g = lti.TransferFactory.first_order(0.0, 1.0, 1.0, 1.0)
    assert lmi.solve(lti.brl_problem(g, gamma)).ok is ok


def test_not_affine():
    prob = lmi.LmiProblem()
    X = prob.symmetric("X", 2)
    with pytest.raises(lmi.NotAffineError):
        X @ X
    with pytest.raises(lmi.LmiError):
        prob.require_psd(X, -1.0)


def test_unbounded():
    prob = lmi.LmiProblem()
    g = prob.scalar("g")
    prob.require_nsd(g)
    prob.minimize(g)
    with pytest.raises(lmi.LmiError):
        lmi.solve(prob)


def test_empty_and_bad_settings():
    with pytest.raises(lmi.LmiError):
        lmi.solve(lmi.LmiProblem())
    prob = lmi.LmiProblem()
    prob.require_psd(prob.scalar("t"))
    with pytest.raises(lmi.LmiError):
        lmi.solve(prob, settings={"no_such_option": 1})


def test_affine_algebra():
    prob = lmi.LmiProblem()
    X = prob.symmetric("X", 2)
    t = prob.scalar("t")
    E = lmi.bmat([[X, np.ones((2, 1))], [np.ones((1, 2)), t]])
    assert E.shape == (3, 3)
    x = np.arange(prob.n_vars, dtype=float) + 1.0
    vals = prob.unpack(x)
    M = E.value(x)
    np.testing.assert_allclose(M[:2, :2], vals["X"])
    assert M[2, 2] == vals["t"]
    B = np.array([[1.0, 2.0], [0.0, 1.0]])
    np.testing.assert_allclose((B.T @ X @ B).value(x), B.T @ vals["X"] @ B)
    np.testing.assert_allclose((2.0 * X - X).value(x), vals["X"])


class TestBisect:
    def test_constant_family(self):
        def fam(level):
            p = lmi.LmiProblem()
            p.require_psd(p.scalar("t"))
            return p
        assert lmi.bisect_feasibility(fam, 0.5, 2.0) == 0.5

    def test_static_gain(self):
        g = lti.TransferFactory.gain([[3.0]])
        v = lmi.bisect_feasibility(lambda gam: lti.brl_problem(g, gam, 0.0), 1.0, 2.0,
                                   rel_tol=1e-6)
        assert v == pytest.approx(3.0, rel=2e-6)

    def test_no_bracket(self):
        def fam(level):
            p = lmi.LmiProblem()
            X = p.symmetric("X", 1)
            p.require_psd(X, 1.0)
            p.require_nsd(X, 1.0)
            return p
        with pytest.raises(lmi.LmiError):
            lmi.bisect_feasibility(fam, 1.0, 2.0, max_expand=3)

    def test_bad_bracket(self):
        with pytest.raises(lmi.LmiError):
            lmi.bisect_feasibility(lambda g: None, 2.0, 1.0)

    def test_column_plant_against_grid(self):
        from gpiqc.experiment import ExperimentConfig
        cfg = ExperimentConfig()
        M = np.asarray(cfg.plant_gain)
        tau = cfg.plant_tau
        G = StateSpace(-np.eye(2) / tau, np.eye(2) / tau, M, np.zeros((2, 2)))
        grid = lti.sigma_max_grid(G, np.concatenate([[0.0], np.logspace(-5, 3, 4000)]))
        assert lti.hinf_norm(G, 1e-6) == pytest.approx(grid, rel=1e-3)


@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_scaling_invariance(seed, c):
    rng = np.random.default_rng(seed)
    g = random_stable(rng, 2, 1, 1)
    nrm = lti.sigma_max_grid(g, np.logspace(-3, 3, 2000))
    for gam in (0.8 * nrm, 1.5 * nrm):
        base = lti.brl_problem(g, gam, 0.0)
        scaled = lmi.LmiProblem()
        scaled.variables = base.variables
        scaled.n_vars = base.n_vars
        for con in base.constraints:
            (scaled.require_psd if con.sense == ">>" else scaled.require_nsd)(
                lmi.AffineExpr(scaled, c * con.expr.const, c * con.expr._coef()), 0.0)
        assert lmi.solve(base).status == lmi.solve(scaled).status


@given(st.integers(0, 10_000))
def test_solution_replay(seed):
    rng = np.random.default_rng(seed)
    g = random_stable(rng, 3, 2, 2)
    prob = lti.brl_problem(g, 2.0 * lti.sigma_max_grid(g, np.logspace(-3, 3, 500)))
    sol = lmi.solve(prob)
    assert sol.ok
    assert lmi.constraint_margin(prob, sol.x) == pytest.approx(sol.margin, abs=1e-9)


def _read_sdpa(path):
    with open(path) as fh:
        lines = [l for l in fh.read().splitlines() if l and not l.startswith('"')]
    m = int(lines[0])
    sizes = [int(v) for v in lines[2].split()]
    c = np.array([float(v) for v in lines[3].split()]) if m else np.zeros(0)
    mats = [[np.zeros((n, n)) for n in sizes] for _ in range(m + 1)]
    for line in lines[4:]:
        k, b, i, j, v = line.split()
        M = mats[int(k)][int(b) - 1]
        M[int(i) - 1, int(j) - 1] = M[int(j) - 1, int(i) - 1] = float(v)
    return c, mats


def test_write_sdpa_roundtrip(tmp_path, rng):
    g = random_stable(rng, 2, 1, 1)
    prob = lti.brl_problem(g, 5.0)
    sol = lmi.solve(prob)
    path = tmp_path / "p.dat-s"
    lmi.write_sdpa(prob, path)
    c, mats = _read_sdpa(path)
    assert c.size == sol.x.size and not np.any(c)
    # sum_i x_i F_i - F_0 must reproduce the (margin-shifted) constraint blocks
    eigs = []
    for b in range(len(mats[0])):
        S = sum(sol.x[k] * mats[k + 1][b] for k in range(sol.x.size)) - mats[0][b]
        eigs.append(np.linalg.eigvalsh(S)[0])
    assert min(eigs) == pytest.approx(sol.margin, abs=1e-9)


def test_write_sdpa_objective(tmp_path):
    prob = lmi.LmiProblem()
    g = prob.scalar("g")
    prob.require_nsd(1.0 - g)
    prob.minimize(3.0 * g)
    lmi.write_sdpa(prob, tmp_path / "p.dat-s")
    c, mats = _read_sdpa(tmp_path / "p.dat-s")
    assert c.tolist() == [3.0]
    # -(1 - g) >= 0  ->  F1 = 1, F0 = 1
    assert mats[1][0][0, 0] == 1.0 and mats[0][0][0, 0] == 1.0
