"""Nominal and robust output-feedback synthesis with static IQC multipliers.

Plants carry named channels: inputs ``p`` (uncertainty), ``w`` (disturbance),
``u`` (control) and outputs ``q``, ``z``, ``y``. The closed loop with a
controller maps ``(p, w) -> (q, z)``; the uncertainty closes ``p = Delta(q)``.

Robust analysis certifies an L2 gain ``gamma`` from ``w`` to ``z`` if there are
``X > 0`` and ``P`` in the multiplier set with

    [He(X A)   X Bp   X Bw     Cz^T ]
    [Bp^T X    0      0        Dzp^T]  +  O^T P O  < 0,
    [Bw^T X    0     -gamma I  Dzw^T]
    [Cz        Dzp    Dzw    -gamma I]

where ``O`` maps ``(x, p, w, z)`` to ``(q, p)``. After factorizing ``P`` the
same LMI is a quadratic-performance condition on a transformed plant with an
extra channel pair ``w1 -> z1`` carrying unit weights, which the
change-of-variables synthesis handles directly.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from . import lmi
from .iqc import (PSI2_COND_LIMIT, Factorization, FactorizationError, MultiplierSet,
                  MultiplierValue, check_membership, factorize)
from .lti import StateSpace, balance, hinf_norm, is_hurwitz, lft_lower, pbh_rank_deficient

log = logging.getLogger(__name__)

#: lower bound on the analysis Lyapunov matrix
X_FLOOR = 1e-8
#: certificate replay tolerance
REPLAY_TOL = 1e-7
#: relative level increases tried when reconstruction is ill posed
RECONSTRUCT_RELAX = (1e-3, 1e-2, 1e-1)
#: relative level increases tried when polishing an analysis certificate
POLISH_RELAX = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1)
#: level used to tell infeasibility from solver trouble after a failed analysis
PROBE_GAMMA = 1e6


class SynthesisError(RuntimeError):
    pass


class InfeasibleError(SynthesisError):
    pass


class SolverFailure(SynthesisError):
    pass


class ReconstructionError(SynthesisError):
    pass


# ---------------------------------------------------------------------------
# plants

@dataclass(frozen=True)
class GeneralizedPlant:
    """State-space plant with channels ``(p, w, u) -> (q, z, y)``.

    The uncertainty pair ``p, q`` may be absent (nominal plant).
    """

    sys: StateSpace
    d_name: Tuple[str, ...] = ("w",)
    e_name: Tuple[str, ...] = ("z",)

    def __post_init__(self):
        g = self.sys
        for c in ("u",) + tuple(self.d_name):
            if not g.has_input(c):
                raise SynthesisError(f"plant lacks input channel {c!r}")
        for c in ("y",) + tuple(self.e_name):
            if not g.has_output(c):
                raise SynthesisError(f"plant lacks output channel {c!r}")
        if g.has_input("p") != g.has_output("q"):
            raise SynthesisError("uncertainty channels p and q must come together")
        if np.any(np.abs(g.Dc("y", "u")) > 0):
            raise SynthesisError("plant needs D_yu = 0")

    @property
    def n_p(self) -> int:
        return self.sys.width("p") if self.sys.has_input("p") else 0

    @property
    def n_q(self) -> int:
        return self.sys.width("q") if self.sys.has_output("q") else 0

    def nominal(self) -> "GeneralizedPlant":
        """Plant with the uncertainty channel removed."""
        ins = [n for n, _ in self.sys.inputs if n != "p"]
        outs = [n for n, _ in self.sys.outputs if n != "q"]
        return GeneralizedPlant(self.sys.select(ins, outs), self.d_name, self.e_name)

    def check(self, tol: float = 1e-8) -> None:
        """Raise unless ``(A, Bu)`` is stabilizable and ``(A, Cy)`` detectable."""
        g = self.sys
        bad_s = pbh_rank_deficient(g.A, g.Bc("u"), "right", tol)
        bad_d = pbh_rank_deficient(g.A, g.Cc("y"), "left", tol)
        if bad_s:
            raise SynthesisError(f"(A, Bu) not stabilizable at eigenvalues {bad_s}")
        if bad_d:
            raise SynthesisError(f"(A, Cy) not detectable at eigenvalues {bad_d}")

    def blocks(self):
        """``(A, Bd, Bu, Ce, Ded, Deu, Cy, Dyd)`` for the stacked d/e channels."""
        g = self.sys
        d, e = list(self.d_name), list(self.e_name)
        Bd = np.hstack([g.Bc(c) for c in d])
        Ce = np.vstack([g.Cc(c) for c in e])
        Ded = np.block([[g.Dc(o, i) for i in d] for o in e])
        Deu = np.vstack([g.Dc(o, "u") for o in e])
        Dyd = np.hstack([g.Dc("y", i) for i in d])
        return g.A, Bd, g.Bc("u"), Ce, Ded, Deu, g.Cc("y"), Dyd

    def to_dict(self) -> dict:
        return {"sys": self.sys.to_dict(), "d_name": list(self.d_name),
                "e_name": list(self.e_name)}

    @classmethod
    def from_dict(cls, d: dict) -> "GeneralizedPlant":
        return cls(StateSpace.from_dict(d["sys"]), tuple(d["d_name"]), tuple(d["e_name"]))


def closed_loop(plant: GeneralizedPlant, ctrl: StateSpace) -> StateSpace:
    """Close ``u = K y``; remaining channels keep their names and order."""
    return lft_lower(plant.sys, ctrl, "u", "y")


# ---------------------------------------------------------------------------
# analysis

def _analysis_blocks(cl: StateSpace, X, gamma, n_q: int, d_name="w", e_name="z"):
    A = cl.A
    nw, nz = cl.width(d_name), cl.width(e_name)
    Bw, Cz, Dzw = cl.Bc(d_name), cl.Cc(e_name), cl.Dc(e_name, d_name)
    if n_q:
        Bp, Dzp = cl.Bc("p"), cl.Dc(e_name, "p")
        npp = Bp.shape[1]
    else:
        npp = 0
        Bp, Dzp = np.zeros((A.shape[0], 0)), np.zeros((nz, 0))
    Z = np.zeros
    XA = X @ A
    blocks = [[XA + XA.T, X @ Bp, X @ Bw, Cz.T],
              [Bp.T @ X, Z((npp, npp)), Z((npp, nw)), Dzp.T],
              [Bw.T @ X, Z((nw, npp)), -gamma * np.eye(nw), Dzw.T],
              [Cz, Dzp, Dzw, -gamma * np.eye(nz)]]
    if not npp:
        blocks = [[r for j, r in enumerate(row) if j != 1] for i, row in enumerate(blocks) if i != 1]
    O = None
    if n_q:
        Cq, Dqp, Dqw = cl.Cc("q"), cl.Dc("q", "p"), cl.Dc("q", d_name)
        O = np.block([[Cq, Dqp, Dqw, Z((n_q, nz))],
                      [Z((npp, A.shape[0])), np.eye(npp), Z((npp, nw)), Z((npp, nz))]])
    return blocks, O


def analysis_matrix(cl: StateSpace, X: np.ndarray, P: Optional[np.ndarray], gamma: float,
                    n_q: int) -> np.ndarray:
    """Numeric left-hand side of the analysis LMI (certificate replay)."""
    blocks, O = _analysis_blocks(cl, np.asarray(X), float(gamma), n_q)
    M = np.block(blocks)
    if O is not None:
        M = M + O.T @ P @ O
    return 0.5 * (M + M.T)


@dataclass
class AnalysisResult:
    status: str
    gamma: float = float("inf")
    P: Optional[MultiplierValue] = None
    X: Optional[np.ndarray] = None
    margin: float = float("nan")
    wall_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status in (lmi.OPTIMAL, lmi.FEASIBLE)


def _analysis_problem(cl: StateSpace, mset: Optional[MultiplierSet],
                      fixed_P: Optional[np.ndarray], gamma: Optional[float]):
    n_q = cl.width("q") if cl.has_output("q") else 0
    if n_q and mset is None and fixed_P is None:
        raise SynthesisError("loop has an uncertainty channel but no multiplier set")
    prob = lmi.LmiProblem()
    X = prob.symmetric("X", cl.n_states)
    g = prob.scalar("gamma") if gamma is None else float(gamma)
    blocks, O = _analysis_blocks(cl, X, g, n_q)
    M = lmi.bmat(blocks)
    P = None
    if n_q:
        if fixed_P is not None:
            M = M + O.T @ np.asarray(fixed_P) @ O
        else:
            P = mset.add_constraints(prob)
            M = M + O.T @ P @ O
    return prob, X, g, M, P, n_q


def _result(sol, cl, gamma, fixed_P, n_q, dt) -> "AnalysisResult":
    Pv = None
    if n_q:
        Pv = MultiplierValue(np.asarray(fixed_P) if fixed_P is not None else sol["P"], n_q)
    return AnalysisResult(sol.status, float(gamma), Pv, np.asarray(sol["X"]), sol.margin, dt)


def robust_analysis(cl: StateSpace, mset: Optional[MultiplierSet],
                    fixed_P: Optional[np.ndarray] = None, strict: Optional[float] = None,
                    tol: float = 1e-8, report_rel: float = 1e-9,
                    polish: bool = True) -> AnalysisResult:
    """Minimize the certified gain of ``cl`` over ``X > 0`` and the multiplier.

    ``cl`` maps ``(p, w) -> (q, z)``; with ``mset=None`` (or no ``p`` channel)
    this is the bounded real lemma on ``w -> z``. ``fixed_P`` freezes the
    multiplier, e.g. a factorized ``diag(I, -I)`` on a transformed loop.
    With ``polish`` the minimizer is replaced by a strictly feasible
    certificate at a slightly larger level (see :func:`certify`).
    """
    prob, X, g, M, P, n_q = _analysis_problem(cl, mset, fixed_P, None)
    prob.require_nsd(M, margin=strict, name="analysis")
    prob.require_psd(X, margin=X_FLOOR, name="X")
    prob.minimize(g)
    t0 = time.perf_counter()
    sol = lmi.solve(prob, tol=tol, report_rel=report_rel)
    dt = time.perf_counter() - t0
    if not sol.ok:
        log.info("analysis %s after %.2fs", sol.status, dt)
        return AnalysisResult(sol.status, wall_time=dt)
    res = _result(sol, cl, sol["gamma"], fixed_P, n_q, dt)
    if not polish:
        return res
    for r in POLISH_RELAX:
        cert = certify(cl, mset, res.gamma * (1.0 + r), fixed_P, tol=tol)
        if cert.ok:
            cert.wall_time += dt
            return cert
    log.warning("could not polish the analysis certificate at level %.6g", res.gamma)
    return res


def certify(cl: StateSpace, mset: Optional[MultiplierSet], gamma: float,
            fixed_P: Optional[np.ndarray] = None, bound: float = 1e8,
            tol: float = 1e-8) -> AnalysisResult:
    """Most strictly feasible ``(X, P)`` at a fixed level ``gamma``.

    Maximizes ``t <= 1`` with the analysis LMI ``<= -t I``, ``X >= X_FLOOR I``
    and ``X, |P| <= bound I``. The status is ``"optimal"`` only if the
    replayed strictness is positive and the multiplier passes the
    membership test.
    """
    prob, X, _, M, P, n_q = _analysis_problem(cl, mset, fixed_P, gamma)
    t = prob.scalar("t")
    n = cl.n_states
    prob.require_nsd(M + t * np.eye(M.shape[0]), name="analysis")
    prob.require_psd(X, margin=X_FLOOR, name="X")
    prob.require_nsd(X - bound * np.eye(n), name="X_bound")
    if P is not None:
        k = P.shape[0]
        prob.require_nsd(P - bound * np.eye(k), name="P_upper")
        prob.require_psd(P + bound * np.eye(k), name="P_lower")
    prob.require_nsd(t - 1.0, name="t_cap")
    prob.minimize(-1.0 * t)
    t0 = time.perf_counter()
    sol = lmi.solve(prob, tol=tol, report_rel=1e-9, accept_inaccurate=True)
    dt = time.perf_counter() - t0
    if not sol.usable:
        return AnalysisResult(sol.status, wall_time=dt)
    res = _result(sol, cl, gamma, fixed_P, n_q, dt)
    Mv = analysis_matrix(cl, res.X, res.P.P if res.P is not None else None, gamma, n_q)
    res.margin = -float(np.linalg.eigvalsh(Mv)[-1])
    member = res.P is None or mset is None or check_membership(res.P, mset)
    xmin = float(np.linalg.eigvalsh(res.X)[0]) if n else 1.0
    res.status = lmi.OPTIMAL if res.margin > 0 and member and xmin > 0 else "not_strict"
    return res


#: Gramian regularizations tried in turn by :func:`analyze_balanced`
BALANCE_REGS = (1e-12, 1e-10, 1e-8, 1e-6)


def _probe_infeasible(cl: StateSpace, mset: Optional[MultiplierSet]) -> bool:
    """True if no strict certificate exists at ``PROBE_GAMMA`` with bounded ``X, P``.

    The unbounded minimum-level problem can be weakly infeasible, where the
    solver reports a numerical failure rather than a certificate of
    infeasibility. The bounded problem always has an optimum, so a
    non-positive best strictness settles the question.
    """
    real, _ = balance(cl, reg=BALANCE_REGS[0])
    probe = certify(real, mset, PROBE_GAMMA)
    log.info("infeasibility probe at level %.0e: %s, strictness %.3e", PROBE_GAMMA,
             probe.status, probe.margin)
    return probe.status == "not_strict" and probe.margin <= 0


def analyze_balanced(cl: StateSpace, mset: Optional[MultiplierSet],
                     **kw) -> Tuple[StateSpace, AnalysisResult]:
    """Robust analysis on balanced realizations of ``cl``.

    Weakly coupled controller modes make the plain realization badly scaled,
    and which Gramian regularization gives the best-conditioned problem
    varies from loop to loop, so several are tried. Returns the realization
    the certificate refers to.
    """
    res = AnalysisResult("not_run")
    real = cl
    for reg in BALANCE_REGS:
        real, _ = balance(cl, reg=reg)
        res = robust_analysis(real, mset, **kw)
        if res.ok:
            return real, res
        log.debug("analysis with balancing regularization %.0e: %s", reg, res.status)
    return real, res


# ---------------------------------------------------------------------------
# plant transformation

def transform_plant(plant: GeneralizedPlant, fac: Factorization) -> GeneralizedPlant:
    """Absorb a factorized multiplier into the plant.

    The uncertainty pair becomes a unit-weight performance pair ``w1 -> z1``
    with ``w1 = Psi2 p`` and ``z1 = Psi1 q + Psi3 p``.
    """
    g = plant.sys
    n_q, n_p = plant.n_q, plant.n_p
    if fac.psi1.shape != (n_q, n_q) or fac.psi2.shape != (n_p, n_p):
        raise SynthesisError("factorization does not match the uncertainty channel")
    cond = fac.psi2_cond
    if not np.isfinite(cond) or cond > PSI2_COND_LIMIT:
        raise FactorizationError(f"Psi2 condition number {cond:.3e} exceeds the limit")
    S = np.linalg.inv(fac.psi2)
    B = np.array(g.B)
    C = np.array(g.C)
    D = np.array(g.D)
    ps, qs = g.input_slice("p"), g.output_slice("q")
    B[:, ps] = g.Bc("p") @ S
    D[:, ps] = g.D[:, ps] @ S
    # rows of q: z1 = Psi1 q + Psi3 p
    C[qs] = fac.psi1 @ g.Cc("q")
    D[qs] = fac.psi1 @ g.D[qs]
    D[qs, ps] = (fac.psi1 @ g.Dc("q", "p") + fac.psi3) @ S
    out = StateSpace(g.A, B, C, D, g.inputs, g.outputs).rename({"p": "w1"}, {"q": "z1"})
    return GeneralizedPlant(out, ("w1",) + tuple(plant.d_name), ("z1",) + tuple(plant.e_name))


# ---------------------------------------------------------------------------
# synthesis

@dataclass
class SynthesisResult:
    controller: StateSpace
    gamma: float
    status: str
    wall_time: float
    diagnostics: Dict[str, float] = field(default_factory=dict)


def _synthesis_problem(blk, n_unit: int, gamma: float):
    """Change-of-variables performance LMI at a fixed level ``gamma``."""
    A, Bd, Bu, Ce, Ded, Deu, Cy, Dyd = blk
    n, nd, ne = A.shape[0], Bd.shape[1], Ce.shape[0]
    nu, ny = Bu.shape[1], Cy.shape[0]
    prob = lmi.LmiProblem()
    X = prob.symmetric("X", n)
    Y = prob.symmetric("Y", n)
    K = prob.full("Khat", n, n)
    L = prob.full("Lhat", n, ny)
    M = prob.full("Mhat", nu, n)
    N = prob.full("Nhat", nu, ny)

    AA = lmi.bmat([[A @ Y + Bu @ M, A + Bu @ N @ Cy], [K, X @ A + L @ Cy]])
    BB = lmi.bmat([[Bd + Bu @ N @ Dyd], [X @ Bd + L @ Dyd]])
    CC = lmi.bmat([[Ce @ Y + Deu @ M, Ce + Deu @ N @ Cy]])
    DD = Ded + Deu @ N @ Dyd
    wd = np.r_[np.ones(n_unit), np.full(nd - n_unit, float(gamma))]
    we = np.r_[np.ones(n_unit), np.full(ne - n_unit, float(gamma))]
    LMI = lmi.bmat([[AA + AA.T, BB, CC.T], [BB.T, -np.diag(wd), DD.T], [CC, DD, -np.diag(we)]])
    XX = lmi.bmat([[Y, np.eye(n)], [np.eye(n), X]])
    return prob, dict(X=X, Y=Y, LMI=LMI, XX=XX)


def _reconstruct(blk, vals) -> StateSpace:
    A, Bd, Bu, Ce, Ded, Deu, Cy, Dyd = blk
    X, Y = vals["X"], vals["Y"]
    Kh, Lh, Mh, Nh = vals["Khat"], vals["Lhat"], vals["Mhat"], vals["Nhat"]
    n = A.shape[0]
    R = np.eye(n) - X @ Y
    Uu, s, Vt = np.linalg.svd(R)
    if s.min() <= 1e-12 * max(1.0, s.max()):
        raise ReconstructionError("I - XY is numerically singular")
    sq = np.sqrt(s)
    U = Uu * sq
    V = Vt.T * sq
    # U V^T = I - XY
    Dk = Nh
    Ck = np.linalg.solve(V, (Mh - Dk @ Cy @ Y).T).T
    Bk = np.linalg.solve(U, Lh - X @ Bu @ Dk)
    inner = Kh - X @ A @ Y - X @ Bu @ Ck @ V.T - U @ Bk @ Cy @ Y - X @ Bu @ Dk @ Cy @ Y
    Ak = np.linalg.solve(V, np.linalg.solve(U, inner).T).T
    if not all(np.all(np.isfinite(m)) for m in (Ak, Bk, Ck, Dk)):
        raise ReconstructionError("non-finite controller matrices")
    return StateSpace(Ak, Bk, Ck, Dk)


@dataclass
class _Point:
    feasible: bool
    margin: float
    values: Optional[dict]
    status: str


def _margin_point(blk, n_unit: int, gamma: float, bound: float, tol: float) -> _Point:
    """Most strictly feasible point at level ``gamma``.

    Maximizes ``t <= 1`` with ``LMI <= -t I`` and ``[[Y, I], [I, X]] >= t I``
    while ``X, Y <= bound I``. The level counts as feasible only if the
    replayed strictness ``t + margin`` is positive. Unlike a direct level
    minimization this never drives the solver onto the feasibility boundary,
    which stalls interior-point methods on badly scaled plants.
    """
    prob, v = _synthesis_problem(blk, n_unit, gamma)
    n = blk[0].shape[0]
    m = v["LMI"].shape[0]
    t = prob.scalar("t")
    prob.require_nsd(v["LMI"] + t * np.eye(m), name="performance")
    prob.require_psd(v["XX"] - t * np.eye(2 * n), name="coupling")
    prob.require_nsd(v["X"] - bound * np.eye(n), name="X_bound")
    prob.require_nsd(v["Y"] - bound * np.eye(n), name="Y_bound")
    prob.require_nsd(t - 1.0, name="t_cap")
    prob.minimize(-1.0 * t)
    sol = lmi.solve(prob, tol=tol, report_rel=1e-6, accept_inaccurate=True)
    if not sol.usable:
        return _Point(False, -np.inf, None, sol.status)
    strict = float(sol["t"]) + min(sol.margin, 0.0)
    return _Point(strict > 0, strict, dict(sol.values), sol.status)


def lmi_synthesis(plant: GeneralizedPlant, n_unit: int = 0,
                  gamma_hi: Optional[float] = None, rel_tol: float = 1e-3,
                  bound: float = 1e6, tol: float = 1e-9, span: float = 1e4,
                  max_expand: int = 12) -> SynthesisResult:
    """Full-order output-feedback synthesis by change of variables.

    The first ``n_unit`` disturbance and error components carry unit weights;
    the rest form the ``gamma`` pair. The smallest feasible level is located
    by bisection on ``log(gamma)``, each step solving a margin-maximization
    problem, and the controller is reconstructed from the strictly feasible
    point at the final upper level.

    Parameters
    ----------
    gamma_hi : float, optional
        Level expected to be feasible (e.g. the current certified level).
        Without it a rough estimate from a level-minimizing solve is used.
    rel_tol : float
        Relative width of the final bisection bracket.
    bound : float
        Upper bound on ``X`` and ``Y``, which keeps ``I - XY`` and the
        reconstructed controller well scaled.
    span : float
        Initial bracket ``[gamma_hi / span, gamma_hi]``.
    """
    blk = plant.blocks()
    t0 = time.perf_counter()
    if not plant.sys.width(plant.d_name[-1]) or n_unit >= blk[1].shape[1]:
        raise SynthesisError("synthesis needs a weighted performance channel")
    n_solves = 0

    def test(g):
        nonlocal n_solves
        n_solves += 1
        pt = _margin_point(blk, n_unit, g, bound, tol)
        log.debug("level %.6g: %s, strictness %.3e", g, pt.status, pt.margin)
        return pt

    hi = float(gamma_hi) if gamma_hi is not None else _level_estimate(blk, n_unit, tol)
    best = test(hi)
    k = 0
    while not best.feasible:
        k += 1
        if k > max_expand:
            raise InfeasibleError(f"no feasible level up to {hi:.3e}")
        hi *= 4.0
        best = test(hi)
    lo = hi / span
    low = test(lo)
    while low.feasible:
        hi, best = lo, low
        lo = hi / span
        if lo < 1e-12:
            break
        low = test(lo)
    while hi > lo * (1.0 + rel_tol):
        mid = float(np.sqrt(hi * lo))
        pt = test(mid)
        if pt.feasible:
            hi, best = mid, pt
        else:
            lo = mid
    # the point at the smallest feasible level can have XY close to I;
    # relax the level slightly until the reconstruction is well posed
    last = None
    for r in (0.0,) + tuple(RECONSTRUCT_RELAX):
        g = hi * (1.0 + r)
        pt = best if r == 0.0 else test(g)
        if not pt.feasible:
            continue
        try:
            ctrl = _reconstruct(blk, pt.values)
        except ReconstructionError as exc:
            last = exc
            log.debug("reconstruction at level %.6g failed: %s", g, exc)
            continue
        diag = {"lower": lo, "strictness": pt.margin, "solves": n_solves, "relax": r}
        return SynthesisResult(ctrl, g, pt.status, time.perf_counter() - t0, diag)
    raise ReconstructionError(f"no well-posed reconstruction near level {hi:.6g}") from last


def _level_estimate(blk, n_unit: int, tol: float) -> float:
    """Rough level from a direct minimization; only used to seed the bracket."""
    A, Bd, Bu, Ce, Ded, Deu, Cy, Dyd = blk
    n, nd, ne = A.shape[0], Bd.shape[1], Ce.shape[0]
    prob = lmi.LmiProblem()
    X = prob.symmetric("X", n)
    Y = prob.symmetric("Y", n)
    K = prob.full("Khat", n, n)
    L = prob.full("Lhat", n, Cy.shape[0])
    M = prob.full("Mhat", Bu.shape[1], n)
    N = prob.full("Nhat", Bu.shape[1], Cy.shape[0])
    g = prob.scalar("gamma")
    AA = lmi.bmat([[A @ Y + Bu @ M, A + Bu @ N @ Cy], [K, X @ A + L @ Cy]])
    BB = lmi.bmat([[Bd + Bu @ N @ Dyd], [X @ Bd + L @ Dyd]])
    CC = lmi.bmat([[Ce @ Y + Deu @ M, Ce + Deu @ N @ Cy]])
    DD = Ded + Deu @ N @ Dyd
    wd = np.r_[np.ones(n_unit), np.zeros(nd - n_unit)]
    we = np.r_[np.ones(n_unit), np.zeros(ne - n_unit)]
    Gd = np.diag(wd) + g * np.diag(1.0 - wd)
    Ge = np.diag(we) + g * np.diag(1.0 - we)
    prob.require_nsd(lmi.bmat([[AA + AA.T, BB, CC.T], [BB.T, -Gd, DD.T], [CC, DD, -Ge]]),
                     margin=None)
    prob.require_psd(lmi.bmat([[Y, np.eye(n)], [np.eye(n), X]]), margin=None)
    prob.minimize(g)
    sol = lmi.solve(prob, tol=tol, report_rel=1e-6, accept_inaccurate=True)
    if sol.status == lmi.INFEASIBLE:
        raise InfeasibleError("synthesis LMIs are infeasible")
    est = float(sol["gamma"]) if sol.usable else float("nan")
    return est if np.isfinite(est) and est > 0 else 1.0


def nominal_hinf_synthesis(plant: GeneralizedPlant, **kw) -> Tuple[StateSpace, float]:
    """H-infinity controller for the plant with the uncertainty channel removed.

    Returns the controller and its closed-loop H-infinity norm (verified by
    bisection on the bounded real lemma).
    """
    g0 = plant.nominal() if plant.n_p else plant
    res = lmi_synthesis(g0, 0, **kw)
    cl = closed_loop(g0, res.controller)
    ok, alpha = is_hurwitz(cl)
    if not ok:
        raise SynthesisError(f"nominal closed loop is not stable (abscissa {alpha:.3e})")
    achieved = hinf_norm(cl.select(list(g0.d_name), list(g0.e_name)))
    if achieved > res.gamma * (1 + 1e-3) + 1e-9:
        log.warning("nominal level %.6g exceeds LMI level %.6g", achieved, res.gamma)
    return res.controller, float(achieved)


def qp_synthesis(plant_g1: GeneralizedPlant, **kw) -> SynthesisResult:
    """Synthesis on a transformed plant with unit-weight pair ``w1 -> z1``."""
    n_unit = plant_g1.sys.width("w1") if plant_g1.sys.has_input("w1") else 0
    return lmi_synthesis(plant_g1, n_unit, **kw)


# ---------------------------------------------------------------------------
# iteration

@dataclass
class IterationRecord:
    index: int
    gamma_synth: float
    gamma_tilde: float
    status: str
    accepted: bool
    controller: Optional[StateSpace] = None
    P: Optional[MultiplierValue] = None
    factorization: Optional[Factorization] = None
    wall_time: float = 0.0
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "index": self.index, "gamma_synth": _f(self.gamma_synth),
            "gamma_tilde": _f(self.gamma_tilde), "status": self.status,
            "accepted": self.accepted,
            "controller": self.controller.to_dict() if self.controller else None,
            "P": self.P.to_dict() if self.P else None,
            "factorization": self.factorization.to_dict() if self.factorization else None,
            "wall_time": self.wall_time, "note": self.note,
        }


def _f(x):
    return None if x is None or not np.isfinite(x) else float(x)


@dataclass
class Certificate:
    closed_loop: StateSpace
    X: np.ndarray
    P: Optional[MultiplierValue]
    gamma: float
    mset: Optional[MultiplierSet]

    def to_dict(self) -> dict:
        return {"closed_loop": self.closed_loop.to_dict(), "X": self.X.tolist(),
                "P": self.P.to_dict() if self.P else None, "gamma": self.gamma,
                "multiplier_set": self.mset.to_dict() if self.mset else None}

    @classmethod
    def from_dict(cls, d: dict) -> "Certificate":
        return cls(StateSpace.from_dict(d["closed_loop"]), np.asarray(d["X"], float),
                   MultiplierValue.from_dict(d["P"]) if d.get("P") else None,
                   float(d["gamma"]),
                   MultiplierSet.from_dict(d["multiplier_set"]) if d.get("multiplier_set") else None)


@dataclass
class ReplayResult:
    ok: bool
    margin: float
    x_min_eig: float
    multiplier_ok: bool
    hurwitz: bool
    abscissa: float


def replay_certificate(cert: Certificate, tol: float = REPLAY_TOL) -> ReplayResult:
    """Recompute the analysis LMI from stored ``(X, P, gamma)``."""
    n_q = cert.P.n_q if cert.P is not None else 0
    M = analysis_matrix(cert.closed_loop, cert.X, cert.P.P if cert.P else None, cert.gamma, n_q)
    margin = -float(np.linalg.eigvalsh(M)[-1])
    xmin = float(np.linalg.eigvalsh(0.5 * (cert.X + cert.X.T))[0]) if cert.X.size else np.inf
    mult = True
    if cert.P is not None and cert.mset is not None:
        mult = check_membership(cert.P, cert.mset, tol)
    stable, alpha = is_hurwitz(cert.closed_loop)
    ok = margin >= -tol and xmin > 0 and mult and stable
    return ReplayResult(bool(ok), margin, xmin, bool(mult), stable, alpha)


@dataclass
class SynthesisReport:
    status: str
    gamma0: float
    records: List[IterationRecord]
    controller: Optional[StateSpace]
    certificate: Optional[Certificate]
    converged: bool
    delta: Optional[float] = None
    mode: str = "early_stop"
    wall_time: float = 0.0

    @property
    def gamma_tilde(self) -> float:
        return self.certificate.gamma if self.certificate else float("inf")

    @property
    def accepted_levels(self) -> List[float]:
        return [r.gamma_tilde for r in self.records if r.accepted]

    def to_dict(self) -> dict:
        d = {
            "status": self.status, "gamma0": _f(self.gamma0),
            "gamma_tilde": _f(self.gamma_tilde), "converged": self.converged,
            "mode": self.mode, "wall_time": self.wall_time,
            "iterations": [r.to_dict() for r in self.records],
            "controller": self.controller.to_dict() if self.controller else None,
            "certificate": self.certificate.to_dict() if self.certificate else None,
        }
        if self.delta is not None:
            d["confidence"] = 1.0 - self.delta
            d["statement"] = (f"with probability at least {1.0 - self.delta:g} the controller "
                              f"stabilizes the true loop with L2 gain at most "
                              f"{_f(self.gamma_tilde)}")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def robust_synthesis_loop(plant: GeneralizedPlant, mset: MultiplierSet, max_iters: int = 20,
                          rel_tol: float = 1e-3, mode: str = "early_stop",
                          delta: Optional[float] = None,
                          controller0: Optional[StateSpace] = None,
                          synth_opts: Optional[dict] = None) -> SynthesisReport:
    """Alternate multiplier analysis and controller synthesis.

    ``mode="early_stop"`` stops at the first candidate that does not improve
    the certified level by more than ``rel_tol``. ``mode="fixed"`` runs all
    ``max_iters`` iterations, always continuing from the latest feasible
    candidate, and returns the best certified controller.

    Analysis runs on a balanced realization of each closed loop (the
    multiplier does not depend on the realization, only ``X`` does) and the
    returned certificate stores that realization.
    """
    if mode not in ("early_stop", "fixed"):
        raise ValueError(f"unknown mode {mode!r}")
    t_start = time.perf_counter()
    plant.check()
    opts = dict(synth_opts or {})
    if controller0 is None:
        K, gamma0 = nominal_hinf_synthesis(plant, **opts)
    else:
        K = controller0
        gamma0 = float("nan")
    log.info("nominal level gamma0 = %.6g", gamma0)
    records: List[IterationRecord] = []

    def analyze(ctrl):
        cl = closed_loop(plant, ctrl)
        if not is_hurwitz(cl)[0]:
            return cl, AnalysisResult("unstable")
        return analyze_balanced(cl, mset if plant.n_p else None)

    cl, an = analyze(K)
    records.append(IterationRecord(0, gamma0, an.gamma, an.status, an.ok, K, an.P))
    if not an.ok:
        status = "infeasible" if an.status in (lmi.INFEASIBLE, "unstable") else "solver_failure"
        if status == "solver_failure" and plant.n_p and _probe_infeasible(cl, mset):
            status = "infeasible"
        return SynthesisReport(status, gamma0, records, K, None, False, delta, mode,
                               time.perf_counter() - t_start)
    best = (K, cl, an)
    current = an
    converged = False
    for k in range(1, max_iters + 1):
        if not plant.n_p:
            converged = True
            break
        t0 = time.perf_counter()
        try:
            fac = factorize(current.P)
            g1 = transform_plant(plant, fac)
            res = qp_synthesis(g1, gamma_hi=current.gamma, **opts)
        except (SynthesisError, FactorizationError) as exc:
            log.warning("iteration %d failed: %s", k, exc)
            records.append(IterationRecord(k, float("nan"), float("nan"), "failed", False,
                                           note=str(exc), wall_time=time.perf_counter() - t0))
            break
        cl_new, an_new = analyze(res.controller)
        improved = an_new.ok and an_new.gamma < best[2].gamma * (1.0 - rel_tol)
        records.append(IterationRecord(k, res.gamma, an_new.gamma, an_new.status, improved,
                                       res.controller, an_new.P, fac,
                                       time.perf_counter() - t0))
        log.info("iteration %d: synthesis %.6g, analysis %.6g (%s)%s", k, res.gamma,
                 an_new.gamma, an_new.status, " accepted" if improved else "")
        if improved:
            best = (res.controller, cl_new, an_new)
        if mode == "early_stop" and not improved:
            converged = True
            break
        if an_new.ok:
            current = an_new
        elif mode == "fixed":
            break
    K, cl, an = best
    cert = Certificate(cl, an.X, an.P, an.gamma, mset if plant.n_p else None)
    return SynthesisReport("ok", gamma0, records, K, cert, converged, delta, mode,
                           time.perf_counter() - t_start)
