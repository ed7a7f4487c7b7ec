"""Acceptance criteria; each test records one PASS/FAIL line for the summary."""

import json
from pathlib import Path

import numpy as np
import pytest
from scipy import optimize

import conftest
from conftest import random_stable
from gpiqc import experiment, gp, iqc, lti, synthesis as syn
from gpiqc.experiment import ExperimentConfig
from gpiqc.lti import TransferFactory as TF
from gpiqc.sector import FunctionBand, SectorBounds, extract_sector
from test_iqc import feasible_multiplier
from test_synthesis import random_controller, random_plant, scalar_loop

ROOT = Path(__file__).resolve().parents[1]
SHIPPED = [ROOT / "reports" / "prior" / "prior_report.json",
           ROOT / "reports" / "learned" / "learned_report.json"]


def record(ok, name, detail):
    conftest.ACCEPTANCE.append((bool(ok), name, detail))
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="module")
def prior_run():
    return experiment.run_prior_experiment(ExperimentConfig())


@pytest.fixture(scope="module")
def learned_run(tmp_path_factory):
    return experiment.run_learned_experiment(ExperimentConfig(),
                                             tmp_path_factory.mktemp("learned"))


def test_gpr_closed_form():
    k = gp.kernel_se(0.5, 0.5)
    lam, R, B, delta = 0.01, 0.1, 1.0, 0.05
    x = np.linspace(-1, 1, 401)
    err = 0.0
    # one point
    x1, y1 = 0.3, 0.7
    post = gp.fit(k, gp.Dataset(np.array([x1]), np.array([y1]), R, lam), B, delta)
    k1 = 0.5 * np.exp(-(x - x1) ** 2 / (2 * 0.25))
    err = max(err, np.max(np.abs(post.mean(x) - k1 * y1 / (0.5 + lam))))
    err = max(err, np.max(np.abs(post.variance(x) - (0.5 - k1 ** 2 / (0.5 + lam)))))
    beta = B + 2 * R * np.sqrt(np.log(0.5 + 1.0) - 2 * np.log(delta))
    err = max(err, abs(post.beta - beta))
    std_ok = np.all(post.std(x) <= np.sqrt(0.5) + 1e-15)
    # two points, explicit 2x2 inverse
    xs, ys = np.array([-0.4, 0.5]), np.array([0.2, -0.6])
    post = gp.fit(k, gp.Dataset(xs, ys, R, lam), B, delta)
    c = 0.5 * np.exp(-0.81 / 0.5)
    a = 0.5 + lam
    det = a * a - c * c
    inv = np.array([[a, -c], [-c, a]]) / det
    kx = 0.5 * np.exp(-(x[:, None] - xs[None, :]) ** 2 / 0.5)
    err = max(err, np.max(np.abs(post.mean(x) - kx @ inv @ ys)))
    var = 0.5 - np.einsum("ti,ij,tj->t", kx, inv, kx)
    err = max(err, np.max(np.abs(post.variance(x) - var)))
    logdet = np.log((0.5 + 1.0) ** 2 - c * c)
    err = max(err, abs(post.logdet - logdet))
    std_ok &= np.all(post.std(x) <= np.sqrt(0.5) + 1e-15)
    record(err <= 1e-10 and std_ok, "GPR closed form",
           f"max deviation {err:.2e} (tol 1e-10), std below prior: {bool(std_ok)}")


def test_constrained_kernel():
    k0 = gp.kernel_zero_at_origin(gp.kernel_se(0.5, 0.5))
    rng = np.random.default_rng(0)
    x = rng.uniform(-5, 5, 1000)
    worst = float(np.max(np.abs(k0(x, np.zeros(1)))))
    vals = []
    for s in range(50):
        r = np.random.default_rng(s)
        f, _ = gp.rkhs_function(k0, r.uniform(-1, 1, 6), r.standard_normal(6))
        vals.append(f(np.array([0.0]))[0])
    zero = all(v == 0.0 for v in vals)
    record(worst <= 1e-12 and zero, "constrained kernel",
           f"max |k0(x,0)| = {worst:.1e} over 1000 x, f(0) == 0 for 50 samples: {zero}")


def test_frequentist_coverage():
    cfg = ExperimentConfig()
    k0 = experiment.kernel0(cfg)
    x = np.linspace(-1, 1, 401)
    delta, trials, fails = 0.05, 200, 0
    for s in range(trials):
        rng = np.random.default_rng(s)
        f, _ = gp.rkhs_function(k0, rng.uniform(-1, 1, 8), rng.standard_normal(8))
        f = f.scaled_to(cfg.phi_norm)
        data = gp.sample_dataset(f, 50, rng, cfg.noise_std, cfg.noise_bound, cfg.reg)
        # B equal to the exact norm: the hardest admissible case
        lo, hi = gp.fit(k0, data, f.norm, delta).band(x)
        y = f(x)
        fails += bool(np.any(lo > y) or np.any(y > hi))
    freq = 1 - fails / trials
    record(freq >= 1 - delta, "frequentist coverage",
           f"containment {freq:.3f} over {trials} trials (need >= {1 - delta})")


def _scan(f, rho, n=100_001):
    x = np.linspace(-1, 1, n)
    x = x[np.abs(x) >= rho]
    r = f(x) / x
    return r.min(), r.max()


def test_sector_extraction_oracle():
    rho, n = 1e-2, 2001
    h = 2.0 / (n - 1)
    rng = np.random.default_rng(0)
    worst = 0.0
    ok = True
    cases = [(lambda x, s=s: s * x, 0.0) for s in (-0.7, 0.0, 0.35)]
    for _ in range(5):
        knots = np.sort(np.concatenate([[-1, 0, 1], rng.uniform(-1, 1, 6)]))
        slopes = rng.uniform(-0.5, 0.8, knots.size)
        vals = knots * slopes
        L = float(np.max(np.abs(np.diff(vals) / np.diff(knots))))
        cases.append((lambda x, k=knots, v=vals: np.interp(x, k, v), L))
    for f, L in cases:
        sb = extract_sector(FunctionBand(f, f), -1, 1, n, L, rho)
        lo, hi = _scan(f, rho)
        tol = 2 * L * h + 1e-12
        ok &= sb.kappa1 <= lo + 1e-12 and sb.kappa2 >= hi - 1e-12
        ok &= sb.kappa1 >= lo - tol and sb.kappa2 <= hi + tol
        worst = max(worst, lo - sb.kappa1, sb.kappa2 - hi)
    record(ok, "sector extraction",
           f"{len(cases)} functions contain the 1e5 scan, max inflation {worst:.2e}")


def test_factorization_roundtrip():
    worst, count = 0.0, 0
    ok = True
    for seed in range(100):
        r = np.random.default_rng(seed)
        pairs = [(-r.uniform(0, 1), r.uniform(0, 1)) for _ in range(1 + seed % 2)]
        ms = iqc.build_multiplier_set([SectorBounds(a, b) for a, b in pairs])
        P = iqc.MultiplierValue(feasible_multiplier(ms, seed), ms.n_q)
        try:
            f = iqc.factorize(P)
        except iqc.FactorizationError:
            ok = False
            continue
        err = np.linalg.norm(f.reconstruct() - P.P, 2)
        ratio = err / (2 * f.eps * (1 + np.linalg.norm(P.P, 2)))
        worst = max(worst, ratio)
        ok &= ratio <= 1.0
        count += 1
    record(ok, "factorization roundtrip",
           f"{count}/100 factorized, worst error / bound = {worst:.3f}")


def test_congruence_equivalence():
    ms = iqc.build_multiplier_set([SectorBounds(-0.3, 0.5)])
    worst, n, seed = 0.0, 0, 0
    ok = True
    while n < 20 and seed < 200:
        g, K = random_plant(seed), random_controller(seed)
        seed += 1
        cl = syn.closed_loop(g, K)
        if not lti.is_hurwitz(cl)[0]:
            continue
        res = syn.robust_analysis(cl, ms, polish=False)
        if not res.ok:
            continue
        fac = iqc.factorize(res.P)
        cl1 = syn.closed_loop(syn.transform_plant(g, fac), K).rename({"w1": "p"}, {"z1": "q"})
        direct = syn.robust_analysis(cl, None, fixed_P=res.P.P, polish=False)
        moved = syn.robust_analysis(cl1, None, fixed_P=fac.p_hat, polish=False)
        ok &= direct.ok and moved.ok
        worst = max(worst, abs(moved.gamma - direct.gamma) / direct.gamma)
        n += 1
    ok &= n == 20 and worst <= 1e-4
    record(ok, "congruence equivalence", f"{n} instances, max relative gap {worst:.2e}")


def test_scalar_soundness():
    res = syn.robust_analysis(scalar_loop(), iqc.build_multiplier_set([SectorBounds(-0.5, 0.5)]))
    grid = max(lti.hinf_norm(lti.lft_lower(scalar_loop(), TF.gain([[k]]), "p", "q"), 1e-8)
               for k in np.linspace(-0.5, 0.5, 101))
    gap = res.gamma / grid - 1
    record(res.ok and -1e-6 <= gap <= 0.05, "analysis soundness",
           f"certified {res.gamma:.6f} vs gridded worst case {grid:.6f}, gap {gap:.2e}")


def _grid_sup(g):
    w = np.concatenate([[0.0], np.logspace(-4, 4, 4000)])
    sv = np.array([np.linalg.svd(lti.freq_response(g, wi), compute_uv=False)[0] for wi in w])
    i = int(np.argmax(sv))
    best = sv[i]
    lo, hi = w[max(i - 1, 0)], w[min(i + 1, w.size - 1)]
    if hi > lo:
        r = optimize.minimize_scalar(
            lambda v: -np.linalg.svd(lti.freq_response(g, v), compute_uv=False)[0],
            bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
        best = max(best, -r.fun)
    return max(best, np.linalg.svd(g.D, compute_uv=False)[0])


def test_hinf_norm():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        g = random_stable(rng, int(rng.integers(1, 5)), int(rng.integers(1, 3)),
                          int(rng.integers(1, 3)))
        ref = _grid_sup(g)
        worst = max(worst, abs(lti.hinf_norm(g) - ref) / ref)
    one = lti.hinf_norm(TF.first_order(0.0, 1.0, 1.0, 1.0))
    ok = worst <= 1e-4 and abs(one - 1.0) <= 1e-5
    record(ok, "H-infinity norm",
           f"max relative gap {worst:.2e} over 50 systems, 1/(s+1) -> {one:.8f}")


def test_prior_experiment(prior_run):
    g = prior_run.get("gamma_tilde", float("inf"))
    ok = prior_run["status"] == "ok" and 8.0 <= g <= 13.0
    record(ok, "prior experiment", f"status {prior_run['status']}, gamma~ {g:.4f} (need [8, 13])")


def test_learned_experiment(prior_run, learned_run):
    s = SectorBounds.from_dict(learned_run["sectors"][0])
    true = SectorBounds.from_dict(learned_run["true_sector"])
    g = learned_run.get("gamma_tilde", float("inf"))
    inside = -0.9 < s.kappa1 and s.kappa2 < 0.9
    ok = learned_run["status"] == "ok" and inside and s.contains(true) \
        and g < prior_run["gamma_tilde"]
    record(ok, "learned experiment",
           f"sector [{s.kappa1:.4f}, {s.kappa2:.4f}] contains true "
           f"[{true.kappa1:.4f}, {true.kappa2:.4f}], gamma~ {g:.4f} < prior "
           f"{prior_run['gamma_tilde']:.4f}")


def test_tradeoff_sweep(tmp_path):
    cfg = ExperimentConfig(sizes=[50, 100, 150, 200, 250, 300], trials=10)
    rows = experiment.run_tradeoff_sweep(cfg, tmp_path)
    w = [r["width_median"] for r in rows]
    g = [r["gamma_tilde"] for r in rows]
    ok = all(r["trials"] >= 10 and r["status"] == "ok" for r in rows)
    ok &= all(b <= a for a, b in zip(w, w[1:])) and all(b <= a for a, b in zip(g, g[1:]))
    record(ok, "tradeoff sweep",
           "widths " + ", ".join(f"{v:.4f}" for v in w)
           + "; gamma~ " + ", ".join(f"{v:.4f}" for v in g))


def test_certificate_replay():
    lines, ok = [], True
    for path in SHIPPED:
        with open(path) as fh:
            d = json.load(fh)
        res = syn.replay_certificate(syn.Certificate.from_dict(d["report"]["certificate"]))
        ok &= res.ok and res.margin >= -1e-7 and res.hurwitz
        lines.append(f"{path.parent.name} margin {res.margin:.2e} hurwitz {res.hurwitz}")
    record(ok, "certificate replay", "; ".join(lines))


def test_simulation_consistency(learned_run):
    sim = learned_run.get("simulation", {})
    runs = sim.get("runs", [])
    g = sim.get("empirical_gain")
    bounded = len(runs) == 20 and not any(r["diverged"] for r in runs) \
        and sim["step"]["bounded"]
    ok = g is not None and bounded and g <= learned_run["gamma_tilde"] * (1 + 1e-2)
    record(ok, "simulation consistency",
           f"empirical gain {g} vs gamma~ {learned_run.get('gamma_tilde')}, "
           f"{len(runs)} excitations bounded: {bounded}")
