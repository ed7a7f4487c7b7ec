"""Distillation-column experiments: a-priori sector, learned sector, data sweep."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import gp, iqc, sector, synthesis
from .lti import StateSpace, TransferFactory

log = logging.getLogger(__name__)

# ground truth used by the default configuration: a 12-term kernel expansion
# with true sector about [-0.0564, 0.3578] on [-1, 1] and slope 0.15 at 0
PHI_CENTERS = np.linspace(-1.0, 1.0, 12).tolist()
PHI_COEFFS = [-0.7123, 0.5713, 0.8823, -0.6299, -1.0, -0.324, 0.0577, -0.6265,
              -0.5876, 0.1178, 0.808, -0.4518]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # plant and weights
    plant_gain: List[List[float]] = field(
        default_factory=lambda: [[87.8, -86.4], [108.2, -109.6]])
    plant_tau: float = 75.0
    # first-order weights (n1 s + n0) / (d1 s + d0)
    weight_e: List[float] = field(default_factory=lambda: [1.0, 0.1, 2.0, 1e-5])
    weight_u: List[float] = field(default_factory=lambda: [1.0, 10.0, 1.0, 100.0])
    # kernel and ground truth
    lengthscale: float = 0.5
    kernel_variance: float = 0.5
    phi_centers: List[float] = field(default_factory=lambda: list(PHI_CENTERS))
    phi_coeffs: List[float] = field(default_factory=lambda: list(PHI_COEFFS))
    phi_norm: float = 2.6053
    # data and noise; noise_level is a standard deviation when
    # noise_interpretation == "std" and a variance when it is "variance"
    n_data: int = 50
    noise_level: float = 0.05
    noise_interpretation: str = "std"
    delta: float = 1e-3
    rkhs_factor: float = 2.0
    shared_function: bool = False
    # sector extraction
    domain: List[float] = field(default_factory=lambda: [-1.0, 1.0])
    grid_points: int = 2001
    exclusion_radius: float = 1e-2
    lipschitz_factor: float = 1.5
    # synthesis
    prior_sector: List[float] = field(default_factory=lambda: [-0.9, 0.9])
    iterations: int = 20
    loop_mode: str = "fixed"
    rel_tol: float = 1e-3
    # sweep
    sizes: List[int] = field(default_factory=lambda: [50, 100, 150, 200, 250, 300])
    trials: int = 10
    workers: int = 0
    seed: int = 0
    # simulation
    sim_step: float = 0.01
    sim_horizon: float = 600.0
    sim_excitations: int = 20

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.noise_interpretation not in ("std", "variance"):
            raise ConfigError("noise_interpretation must be 'std' or 'variance'")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if self.n_data < 1 or any(n < 1 for n in self.sizes):
            raise ConfigError("data sizes must be positive")
        if self.trials < 1 or self.iterations < 0:
            raise ConfigError("trials must be >= 1 and iterations >= 0")
        if self.noise_level < 0 or self.rkhs_factor <= 0 or self.phi_norm <= 0:
            raise ConfigError("noise level, RKHS factor and norm must be non-negative/positive")
        if len(self.phi_centers) != len(self.phi_coeffs):
            raise ConfigError("phi centers and coefficients differ in length")
        if not self.domain[0] < 0 < self.domain[1]:
            raise ConfigError("domain must contain 0")
        if self.prior_sector[0] > self.prior_sector[1]:
            raise ConfigError("prior sector is reversed")
        if self.loop_mode not in ("fixed", "early_stop"):
            raise ConfigError("loop_mode must be 'fixed' or 'early_stop'")
        if self.lipschitz_factor < 0 or self.grid_points < 3 or self.exclusion_radius <= 0:
            raise ConfigError("bad sector-extraction settings")
        if self.sim_step <= 0 or self.sim_horizon <= self.sim_step:
            raise ConfigError("simulation needs 0 < step < horizon")

    # noise model ------------------------------------------------------------
    @property
    def noise_std(self) -> float:
        if self.noise_interpretation == "std":
            return self.noise_level
        return float(np.sqrt(self.noise_level))

    @property
    def reg(self) -> float:
        """GP likelihood variance; Gaussian noise of std s is s-subgaussian."""
        return max(self.noise_std ** 2, 1e-10)

    @property
    def noise_bound(self) -> float:
        return self.noise_std

    # serialization ------------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


# ---------------------------------------------------------------------------
# plant

def _first_order_scalars(coeffs) -> Tuple[float, float, float, float]:
    s = TransferFactory.first_order(*coeffs)
    return float(s.A[0, 0]), float(s.B[0, 0]), float(s.C[0, 0]), float(s.D[0, 0])


def build_distcol_plant(cfg: Optional[ExperimentConfig] = None,
                        monitor: bool = False) -> synthesis.GeneralizedPlant:
    """Weighted two-channel distillation column with input nonlinearity.

    States ``(x_G, x_e, x_u)``. Inputs ``p`` (nonlinearity output), ``w``
    (reference), ``u``; outputs ``q = u``, ``z = (W_e e, W_u u)`` and the
    measurement ``y = e = r - G (u - p)``. With ``monitor=True`` the
    unweighted error is repeated as an extra output ``e``.
    """
    cfg = cfg or ExperimentConfig()
    M = np.asarray(cfg.plant_gain, dtype=float)
    tau = float(cfg.plant_tau)
    ae, be, ce, de = _first_order_scalars(cfg.weight_e)
    au, bu, cu, du = _first_order_scalars(cfg.weight_u)
    I, Z = np.eye(2), np.zeros((2, 2))
    A = np.block([[-I / tau, Z, Z], [-be * I, ae * I, Z], [Z, Z, au * I]])
    B = np.block([[-M / tau, Z, M / tau], [Z, be * I, Z], [Z, Z, bu * I]])
    C = np.block([[Z, Z, Z], [-de * I, ce * I, Z], [Z, Z, cu * I], [-I, Z, Z]])
    D = np.block([[Z, Z, I], [Z, de * I, Z], [Z, Z, du * I], [Z, I, Z]])
    outs = [("q", 2), ("z", 4), ("y", 2)]
    if monitor:
        C = np.vstack([C, C[-2:]])
        D = np.vstack([D, D[-2:]])
        outs.append(("e", 2))
    sys = StateSpace(A, B, C, D, [("p", 2), ("w", 2), ("u", 2)], outs)
    return synthesis.GeneralizedPlant(sys)


# ---------------------------------------------------------------------------
# ground truth and learning

def kernel0(cfg: ExperimentConfig) -> gp.Kernel:
    return gp.kernel_zero_at_origin(gp.kernel_se(cfg.lengthscale, cfg.kernel_variance))


def ground_truth(cfg: ExperimentConfig) -> gp.RkhsFunction:
    f, _ = gp.rkhs_function(kernel0(cfg), cfg.phi_centers, cfg.phi_coeffs)
    return f.scaled_to(cfg.phi_norm)


def trial_rng(seed: int, trial: int = 0, n: int = 0) -> np.random.Generator:
    """Independent stream per ``(seed, trial, size)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(trial), int(n)]))


@dataclass
class LearnedSector:
    sectors: List[sector.SectorBounds]
    posterior: gp.GpPosterior
    data: gp.Dataset
    deltas: List[float]


def learn_sector(cfg: ExperimentConfig, n: int, rng: np.random.Generator) -> LearnedSector:
    """Sample data from the ground truth, fit the GP and extract sectors.

    Both uncertainty channels carry the same function. With
    ``shared_function`` a single band is used for both; otherwise the
    confidence budget is split across the two channels.
    """
    f = ground_truth(cfg)
    a, b = cfg.domain
    data = gp.sample_dataset(f, n, rng, cfg.noise_std, cfg.noise_bound, cfg.reg, a, b)
    deltas = sector.split_delta(cfg.delta, 2, cfg.shared_function)
    post = gp.fit(kernel0(cfg), data, cfg.rkhs_factor * f.norm, min(deltas))
    L = cfg.lipschitz_factor * sector.edge_slope(post, a, b)
    sb = sector.extract_sector(post, a, b, cfg.grid_points, L, cfg.exclusion_radius,
                               min(deltas))
    return LearnedSector([sb, sb], post, data, deltas)


def prior_sectors(cfg: ExperimentConfig) -> List[sector.SectorBounds]:
    k1, k2 = cfg.prior_sector
    s = sector.SectorBounds(float(k1), float(k2), tuple(cfg.domain))
    return [s, s]


def run_synthesis(cfg: ExperimentConfig, sectors: Sequence[sector.SectorBounds],
                  delta: Optional[float] = None,
                  iterations: Optional[int] = None) -> synthesis.SynthesisReport:
    plant = build_distcol_plant(cfg)
    mset = iqc.build_multiplier_set(sectors)
    iters = cfg.iterations if iterations is None else iterations
    return synthesis.robust_synthesis_loop(plant, mset, iters, cfg.rel_tol, cfg.loop_mode,
                                           delta)


# ---------------------------------------------------------------------------
# experiments

def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)


def _safe_synthesis(cfg: ExperimentConfig, sectors, delta=None) -> Tuple[dict, object]:
    """Run the loop; failures become a status instead of an exception."""
    try:
        rep = run_synthesis(cfg, sectors, delta)
    except iqc.AssumptionViolation as exc:
        return {"status": "assumption_violated", "error": str(exc)}, None
    except synthesis.InfeasibleError as exc:
        return {"status": "infeasible", "error": str(exc)}, None
    except (synthesis.SynthesisError, iqc.IqcError) as exc:
        return {"status": "solver_failure", "error": str(exc)}, None
    out = {"report": rep.to_dict(), "status": rep.status, "gamma_tilde": rep.gamma_tilde,
           "gamma0": rep.gamma0}
    if rep.certificate is not None:
        out["replay"] = asdict(synthesis.replay_certificate(rep.certificate))
    return out, rep


def _export(out: Optional[Path], name: str, res: dict, rep) -> None:
    if out is None:
        return
    out = Path(out)
    _write_json(out / f"{name}_report.json", res)
    if rep is not None and rep.controller is not None:
        with open(out / "controller.json", "w") as fh:
            fh.write(rep.controller.to_json())


def run_prior_experiment(cfg: ExperimentConfig, out: Optional[Path] = None) -> dict:
    """Robust synthesis with the a-priori sector; writes ``prior_report.json``."""
    secs = prior_sectors(cfg)
    res = {"experiment": "prior", "config": cfg.to_dict(),
           "sectors": [s.to_dict() for s in secs]}
    syn, rep = _safe_synthesis(cfg, secs)
    res.update(syn)
    _export(out, "prior", res, rep)
    log.info("prior experiment: status %s, gamma~ %s", res["status"], res.get("gamma_tilde"))
    return res


def simulation_summary(cfg: ExperimentConfig, controller: StateSpace, gamma_tilde: float,
                       out: Optional[Path] = None) -> dict:
    """Step response and empirical gain of the loop with the true nonlinearity."""
    from . import sim
    loop = sim.LureLoop.from_experiment(cfg, controller)
    step = sim.simulate(loop, sim.SignalSpec("step", amplitude=1.0), cfg.sim_step,
                        cfg.sim_horizon)
    summ = {"step": step.summary()}
    if out is not None:
        step.to_csv(Path(out) / "trajectory.csv", stride=10)
    if cfg.sim_excitations > 0 and not step.diverged:
        exc = sim.random_excitations(cfg.sim_excitations, cfg.seed)
        try:
            g, rows = sim.empirical_l2_gain(loop, exc, cfg.sim_step, cfg.sim_horizon, detail=True)
            summ.update(empirical_gain=g, runs=rows,
                        q_contained=bool(all(r["max_abs_q"] <= 1.0 for r in rows)),
                        within_certificate=bool(g <= gamma_tilde * (1 + 1e-2)))
        except sim.SimulationError as exc_:
            summ.update(empirical_gain=None, error=str(exc_))
    return summ


def run_learned_experiment(cfg: ExperimentConfig, out: Optional[Path] = None,
                           simulate_final: bool = True) -> dict:
    """Learn a sector from data, synthesize and (optionally) simulate.

    Writes the dataset, band, report and trajectory files to ``out``.
    """
    f = ground_truth(cfg)
    rng = trial_rng(cfg.seed, 0, cfg.n_data)
    learned = learn_sector(cfg, cfg.n_data, rng)
    true = sector.scan_sector(f, *cfg.domain)
    res = {"experiment": "learned", "config": cfg.to_dict(), "n_data": cfg.n_data,
           "seed": cfg.seed, "true_sector": true.to_dict(),
           "sectors": [s.to_dict() for s in learned.sectors],
           "beta": learned.posterior.beta, "deltas": learned.deltas}
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        learned.data.to_csv(out / "dataset.csv")
        learned.posterior.band_csv(out / "band.csv", np.linspace(*cfg.domain, 401))
    if not all(s.sign_ok for s in learned.sectors):
        res["status"] = "assumption_violated"
        _export(out, "learned", res, None)
        return res
    syn, rep = _safe_synthesis(cfg, learned.sectors, cfg.delta)
    res.update(syn)
    if simulate_final and rep is not None and rep.status == "ok":
        res["simulation"] = simulation_summary(cfg, rep.controller, rep.gamma_tilde, out)
    _export(out, "learned", res, rep)
    log.info("learned experiment: sector [%.4f, %.4f], gamma~ %s", learned.sectors[0].kappa1,
             learned.sectors[0].kappa2, res.get("gamma_tilde"))
    return res


def _sweep_trial(args) -> Tuple[int, int, float, float, float]:
    cfg_d, n, t = args
    cfg = ExperimentConfig.from_dict(cfg_d)
    try:
        ls = learn_sector(cfg, n, trial_rng(cfg.seed, t, n))
        s = ls.sectors[0]
        return n, t, s.kappa1, s.kappa2, ls.posterior.beta
    except (gp.GpError, sector.SectorError) as exc:
        log.warning("sweep cell n=%d trial=%d failed: %s", n, t, exc)
        return n, t, float("nan"), float("nan"), float("nan")


def _sweep_synth(args) -> Tuple[int, float, str]:
    cfg_d, n, k1, k2 = args
    cfg = ExperimentConfig.from_dict(cfg_d)
    s = sector.SectorBounds(k1, k2, tuple(cfg.domain))
    try:
        rep = run_synthesis(cfg, [s, s])
        return n, rep.gamma_tilde, rep.status
    except (synthesis.SynthesisError, iqc.IqcError) as exc:
        log.warning("sweep synthesis n=%d failed: %s", n, exc)
        return n, float("inf"), "failed"


def _map(fn, jobs, workers):
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


def run_tradeoff_sweep(cfg: ExperimentConfig, out: Optional[Path] = None) -> List[dict]:
    """Sector statistics and robust level per data size.

    Synthesis runs on the trial-averaged sector, which is a reporting
    convention rather than a certified bound.
    """
    cd = cfg.to_dict()
    jobs = [(cd, n, t) for n in cfg.sizes for t in range(cfg.trials)]
    cells = _map(_sweep_trial, jobs, cfg.workers)
    rows = []
    for n in cfg.sizes:
        k = np.array([(c[2], c[3]) for c in cells if c[0] == n], dtype=float)
        k = k[np.all(np.isfinite(k), axis=1)]
        w = k[:, 1] - k[:, 0]
        rows.append({"n": n, "trials": int(k.shape[0]),
                     "kappa1_mean": float(k[:, 0].mean()), "kappa1_std": float(k[:, 0].std()),
                     "kappa2_mean": float(k[:, 1].mean()), "kappa2_std": float(k[:, 1].std()),
                     "width_median": float(np.median(w)),
                     "averaged_sector": True})
    synth = _map(_sweep_synth, [(cd, r["n"], min(r["kappa1_mean"], 0.0),
                                 max(r["kappa2_mean"], 0.0)) for r in rows], cfg.workers)
    for r, (_, g, st) in zip(rows, synth):
        r["gamma_tilde"] = g
        r["status"] = st
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        with open(out / "sweep_trials.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "trial", "kappa1", "kappa2", "beta"])
            for c in sorted(cells):
                w.writerow([c[0], c[1]] + [repr(float(v)) for v in c[2:]])
    return rows
