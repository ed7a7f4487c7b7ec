"""Small LMI modelling layer on top of the Clarabel conic solver.

Decision variables are scalars, symmetric matrices or full matrices. Every
expression is kept affine in the decision variables; multiplying two
non-constant expressions raises. Constraints are symmetric matrix
inequalities ``F(x) >= margin*I`` or ``F(x) <= -margin*I``.

Example
-------
>>> prob = LmiProblem()
>>> g = prob.scalar("gamma")
>>> prob.require_nsd(1.0 - g)
>>> prob.minimize(g)
>>> round(solve(prob).objective, 6)
1.0
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import clarabel
import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
FEASIBLE = "feasible"
INFEASIBLE = "infeasible"
NUMERICAL_FAILURE = "numerical_failure"
#: solver stalled, but the last iterate satisfies the constraints within the slack
INACCURATE = "inaccurate"

#: relative strictness used for strict inequalities when no margin is given
DEFAULT_STRICTNESS = 1e-6


class LmiError(Exception):
    """Raised for malformed problems and unbounded objectives."""


class NotAffineError(LmiError):
    """Raised when an expression would become a product of two variables."""


class AffineExpr:
    """Matrix-valued affine function of the problem's decision variables.

    The value is ``const + reshape(coef @ x)``, entries stored row-major.
    """

    __array_priority__ = 1000

    def __init__(self, problem: "LmiProblem", const: np.ndarray, coef: np.ndarray):
        const = np.atleast_2d(np.asarray(const, dtype=float))
        self.problem = problem
        self.const = const
        self.coef = coef
        if coef.shape[0] != const.size:
            raise LmiError("coefficient rows do not match expression size")

    @property
    def shape(self):
        return self.const.shape

    @property
    def T(self) -> "AffineExpr":
        r, c = self.shape
        idx = np.arange(r * c).reshape(r, c).T.ravel()
        return AffineExpr(self.problem, self.const.T, self._coef()[idx])

    def _coef(self) -> np.ndarray:
        nv = self.problem.n_vars
        if self.coef.shape[1] < nv:
            pad = np.zeros((self.coef.shape[0], nv - self.coef.shape[1]))
            self.coef = np.hstack([self.coef, pad])
        return self.coef

    def _lift(self, other) -> "AffineExpr":
        if isinstance(other, AffineExpr):
            if other.problem is not self.problem:
                raise LmiError("expressions belong to different problems")
            return other
        other = np.asarray(other, dtype=float)
        if other.ndim == 0:
            other = other * np.ones(self.shape)
        return self.problem.constant(other)

    def __add__(self, other):
        other = self._lift(other)
        if other.shape != self.shape:
            raise LmiError(f"shape mismatch {self.shape} vs {other.shape}")
        return AffineExpr(self.problem, self.const + other.const,
                          self._coef() + other._coef())

    __radd__ = __add__

    def __neg__(self):
        return AffineExpr(self.problem, -self.const, -self._coef())

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        if isinstance(other, AffineExpr):
            if other.is_constant():
                other = other.const
            elif self.is_constant():
                return other * self.const
            else:
                raise NotAffineError("product of two decision expressions")
        other = np.asarray(other, dtype=float)
        if other.size == 1:
            s = float(other.item())
            return AffineExpr(self.problem, s * self.const, s * self._coef())
        if self.shape == (1, 1):
            # scalar expression times a constant matrix
            coef = np.outer(other.ravel(), self._coef()[0])
            return AffineExpr(self.problem, self.const[0, 0] * other, coef)
        raise LmiError("elementwise products are not supported; use @")

    __rmul__ = __mul__

    def __matmul__(self, other):
        if isinstance(other, AffineExpr):
            if not other.is_constant():
                if self.is_constant():
                    return self.const @ other
                raise NotAffineError("product of two decision expressions")
            other = other.const
        R = np.atleast_2d(np.asarray(other, dtype=float))
        r, c = self.shape
        if R.shape[0] != c:
            raise LmiError(f"shape mismatch {self.shape} @ {R.shape}")
        # vec_r(E R) = (I_r kron R^T) vec_r(E)
        T = np.kron(np.eye(r), R.T)
        return AffineExpr(self.problem, self.const @ R, T @ self._coef())

    def __rmatmul__(self, other):
        L = np.atleast_2d(np.asarray(other, dtype=float))
        r, c = self.shape
        if L.shape[1] != r:
            raise LmiError(f"shape mismatch {L.shape} @ {self.shape}")
        T = np.kron(L, np.eye(c))
        return AffineExpr(self.problem, L @ self.const, T @ self._coef())

    def is_constant(self) -> bool:
        return not np.any(self._coef())

    def sym(self) -> "AffineExpr":
        """Return ``E + E^T``."""
        return self + self.T

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        coef = self._coef()
        return self.const + (coef[:, : x.size] @ x).reshape(self.shape)

    def __repr__(self):
        return f"AffineExpr(shape={self.shape})"


Operand = Union[AffineExpr, np.ndarray, float, int, None]


def bmat(blocks: Sequence[Sequence[Operand]]) -> AffineExpr:
    """Assemble a block matrix of expressions, arrays and ``None`` (zeros).

    Row heights and column widths are inferred from the non-``None`` blocks.
    """
    problem = None
    for row in blocks:
        for b in row:
            if isinstance(b, AffineExpr):
                problem = b.problem
    if problem is None:
        raise LmiError("bmat needs at least one expression; use np.block")
    nr, nc = len(blocks), len(blocks[0])
    heights = [None] * nr
    widths = [None] * nc
    for i, row in enumerate(blocks):
        if len(row) != nc:
            raise LmiError("ragged block rows")
        for j, b in enumerate(row):
            if b is None:
                continue
            shp = b.shape if isinstance(b, AffineExpr) else np.atleast_2d(b).shape
            if np.ndim(b) == 0 and not isinstance(b, AffineExpr):
                continue
            for store, k, v in ((heights, i, shp[0]), (widths, j, shp[1])):
                if store[k] is None:
                    store[k] = v
                elif store[k] != v:
                    raise LmiError(f"inconsistent block size at ({i}, {j})")
    if any(h is None for h in heights) or any(w is None for w in widths):
        raise LmiError("cannot infer block sizes")
    H, W = sum(heights), sum(widths)
    const = np.zeros((H, W))
    coef = np.zeros((H * W, problem.n_vars))
    r0 = 0
    for i, row in enumerate(blocks):
        c0 = 0
        for j, b in enumerate(row):
            h, w = heights[i], widths[j]
            if b is not None and h and w:
                e = b if isinstance(b, AffineExpr) else problem.constant(
                    np.broadcast_to(np.asarray(b, dtype=float), (h, w)))
                const[r0:r0 + h, c0:c0 + w] = e.const
                rows = ((r0 + np.arange(h))[:, None] * W + c0 + np.arange(w)).ravel()
                coef[rows] = e._coef()
            c0 += w
        r0 += h
    return AffineExpr(problem, const, coef)


@dataclass
class Variable:
    name: str
    kind: str  # "scalar", "symmetric" or "full"
    shape: tuple
    offset: int
    size: int


@dataclass
class Constraint:
    expr: AffineExpr
    sense: str  # ">>" (psd) or "<<" (nsd)
    margin: Optional[float]  # None means default strictness
    name: str = ""

    def oriented(self, x: np.ndarray) -> np.ndarray:
        M = self.expr.value(x)
        M = 0.5 * (M + M.T)
        return M if self.sense == ">>" else -M


class LmiProblem:
    """Container for decision variables, LMI constraints and a linear objective."""

    def __init__(self):
        self.variables: Dict[str, Variable] = {}
        self.constraints: List[Constraint] = []
        self.objective: Optional[AffineExpr] = None
        self.n_vars = 0

    # variables ---------------------------------------------------------
    def _new(self, name, kind, shape, size, template):
        if name in self.variables:
            raise LmiError(f"duplicate variable {name!r}")
        var = Variable(name, kind, shape, self.n_vars, size)
        self.variables[name] = var
        self.n_vars += size
        coef = np.zeros((template.shape[0], self.n_vars))
        coef[:, var.offset:] = template
        return AffineExpr(self, np.zeros(shape), coef)

    def scalar(self, name: str) -> AffineExpr:
        return self._new(name, "scalar", (1, 1), 1, np.ones((1, 1)))

    def symmetric(self, name: str, n: int) -> AffineExpr:
        iu = np.triu_indices(n)
        size = len(iu[0])
        template = np.zeros((n * n, size))
        for k, (i, j) in enumerate(zip(*iu)):
            template[i * n + j, k] = 1.0
            template[j * n + i, k] = 1.0
        return self._new(name, "symmetric", (n, n), size, template)

    def full(self, name: str, rows: int, cols: int) -> AffineExpr:
        size = rows * cols
        return self._new(name, "full", (rows, cols), size, np.eye(size))

    def constant(self, M) -> AffineExpr:
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return AffineExpr(self, M, np.zeros((M.size, self.n_vars)))

    # constraints -------------------------------------------------------
    def _add(self, expr, sense, margin, name):
        expr = expr if isinstance(expr, AffineExpr) else self.constant(expr)
        r, c = expr.shape
        if r != c:
            raise LmiError("LMI blocks must be square")
        if margin is not None and margin < 0:
            raise LmiError("strictness margin must be non-negative")
        sym = AffineExpr(self, 0.5 * (expr.const + expr.const.T),
                         0.5 * (expr._coef() + expr.T._coef()))
        self.constraints.append(Constraint(sym, sense, margin, name))

    def require_psd(self, expr, margin: Optional[float] = 0.0, name: str = ""):
        """Add ``expr >= margin*I``; ``margin=None`` selects the default strictness."""
        self._add(expr, ">>", margin, name)

    def require_nsd(self, expr, margin: Optional[float] = 0.0, name: str = ""):
        """Add ``expr <= -margin*I``; ``margin=None`` selects the default strictness."""
        self._add(expr, "<<", margin, name)

    def minimize(self, expr):
        expr = expr if isinstance(expr, AffineExpr) else self.constant(expr)
        if expr.shape != (1, 1):
            raise LmiError("objective must be scalar")
        self.objective = expr

    def scale(self) -> float:
        """Largest absolute constant entry over all constraint blocks."""
        vals = [np.max(np.abs(c.expr.const)) for c in self.constraints if c.expr.const.size]
        return max(vals) if vals and max(vals) > 0 else 1.0

    def margins(self) -> List[float]:
        default = DEFAULT_STRICTNESS * self.scale()
        return [default if c.margin is None else c.margin for c in self.constraints]

    def unpack(self, x: np.ndarray) -> Dict[str, Union[float, np.ndarray]]:
        out = {}
        for v in self.variables.values():
            seg = x[v.offset:v.offset + v.size]
            if v.kind == "scalar":
                out[v.name] = float(seg[0])
            elif v.kind == "full":
                out[v.name] = seg.reshape(v.shape).copy()
            else:
                n = v.shape[0]
                M = np.zeros((n, n))
                M[np.triu_indices(n)] = seg
                out[v.name] = M + np.triu(M, 1).T
        return out


@dataclass
class LmiSolution:
    status: str
    values: Dict[str, Union[float, np.ndarray]]
    objective: float
    margin: float
    iterations: int
    wall_time: float
    solver_status: str = ""
    x: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def ok(self) -> bool:
        return self.status in (OPTIMAL, FEASIBLE)

    @property
    def usable(self) -> bool:
        """``ok`` or an accepted inaccurate iterate."""
        return self.ok or self.status == INACCURATE

    def __getitem__(self, name):
        return self.values[name]

    def value(self, expr: AffineExpr) -> np.ndarray:
        return expr.value(self.x)


def _svec_rows(n: int):
    """Row-major indices into an n*n matrix and scale factors, Clarabel order."""
    idx, scl = [], []
    for j in range(n):
        for i in range(j + 1):
            idx.append(i * n + j)
            scl.append(1.0 if i == j else np.sqrt(2.0))
    return np.array(idx), np.array(scl)


def constraint_margin(problem: LmiProblem, x: np.ndarray) -> float:
    """Most negative eigenvalue over all (margin-shifted) constraint blocks."""
    worst = np.inf
    for c, m in zip(problem.constraints, problem.margins()):
        M = c.oriented(x)
        if M.size:
            worst = min(worst, np.linalg.eigvalsh(M)[0] - m)
    return float(worst)


def solve(problem: LmiProblem, tol: float = 1e-7, report_tol: float = 1e-7,
          max_iter: int = 200, verbose: bool = False, report_rel: float = 0.0,
          chordal: bool = True, accept_inaccurate: bool = False,
          settings: Optional[Dict[str, object]] = None) -> LmiSolution:
    """Solve an LMI problem with Clarabel.

    Parameters
    ----------
    problem : LmiProblem
        Problem to solve; a missing objective means pure feasibility.
    tol : float
        Feasibility and duality-gap tolerance handed to the solver.
    report_tol : float
        A solution is reported feasible only if the replayed constraint
        margin is at least ``-report_tol``.
    report_rel : float
        Extra slack relative to the largest constraint-matrix entry, for
        badly scaled problems where only relative accuracy is meaningful.
    accept_inaccurate : bool
        Report a stalled solve whose last iterate passes the margin check as
        ``"inaccurate"`` instead of a numerical failure.
    settings : dict, optional
        Extra Clarabel settings by attribute name.
    """
    if not problem.constraints:
        raise LmiError("problem has no constraints")
    nv = problem.n_vars
    margins = problem.margins()
    A_blocks, b_parts, cones = [], [], []
    for c, m in zip(problem.constraints, margins):
        n = c.expr.shape[0]
        if n == 0:
            continue
        sign = 1.0 if c.sense == ">>" else -1.0
        F0 = sign * c.expr.const - m * np.eye(n)
        Fi = sign * c.expr._coef()
        if n == 1:
            A_blocks.append(-Fi)
            b_parts.append(F0.ravel())
            cones.append(clarabel.NonnegativeConeT(1))
        else:
            idx, scl = _svec_rows(n)
            A_blocks.append(-Fi[idx] * scl[:, None])
            b_parts.append(F0.ravel()[idx] * scl)
            cones.append(clarabel.PSDTriangleConeT(n))
    A = sp.csc_matrix(np.vstack(A_blocks))
    b = np.concatenate(b_parts)
    q = np.zeros(nv)
    if problem.objective is not None:
        q = problem.objective._coef()[0].copy()
    P = sp.csc_matrix((nv, nv))

    opts = clarabel.DefaultSettings()
    opts.verbose = verbose
    opts.max_iter = max_iter
    opts.tol_feas = tol
    opts.tol_gap_abs = tol
    opts.tol_gap_rel = tol
    opts.presolve_enable = False
    opts.chordal_decomposition_enable = chordal
    for k, v in (settings or {}).items():
        if not hasattr(opts, k):
            raise LmiError(f"unknown solver setting {k!r}")
        setattr(opts, k, v)
    t0 = time.perf_counter()
    raw = clarabel.DefaultSolver(P, q, A, b, cones, opts).solve()
    wall = time.perf_counter() - t0

    solver_status = str(raw.status)
    x = np.asarray(raw.x, dtype=float)
    if solver_status == "DualInfeasible" and problem.objective is not None:
        raise LmiError("objective is unbounded below")
    if solver_status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        status = INFEASIBLE
        margin = -np.inf
    else:
        margin = constraint_margin(problem, x) if np.all(np.isfinite(x)) else -np.inf
        slack = report_tol
        if report_rel > 0 and np.all(np.isfinite(x)):
            slack += report_rel * max(float(np.abs(c.expr.value(x)).max())
                                      for c in problem.constraints)
        if solver_status in ("Solved", "AlmostSolved") and margin >= -slack:
            status = OPTIMAL if problem.objective is not None else FEASIBLE
        elif accept_inaccurate and margin >= -slack and solver_status in (
                "NumericalError", "MaxIterations", "InsufficientProgress", "AlmostSolved"):
            status = INACCURATE
        else:
            status = NUMERICAL_FAILURE
    obj = float(problem.objective.value(x)[0, 0]) if problem.objective is not None else 0.0
    if status == NUMERICAL_FAILURE:
        log.debug("LMI solve ended with %s (margin %.3e)", solver_status, margin)
    return LmiSolution(status=status, values=problem.unpack(x), objective=obj,
                       margin=float(margin), iterations=int(raw.iterations),
                       wall_time=wall, solver_status=solver_status, x=x)


def bisect_feasibility(family: Callable[[float], LmiProblem], lo: float, hi: float,
                       rel_tol: float = 1e-6, max_expand: int = 60, **solve_kw) -> float:
    """Smallest level in ``[lo, hi]`` at which ``family(level)`` is feasible.

    ``family`` must be monotone: infeasible below the threshold, feasible
    above. If ``hi`` is infeasible it is doubled up to ``max_expand`` times
    before giving up. Numerical failures count as infeasible, which keeps
    the returned level on the safe (feasible) side.
    """
    def feasible(level):
        return solve(family(level), **solve_kw).ok

    if lo < 0 or hi <= lo:
        raise LmiError("need 0 <= lo < hi")
    if feasible(lo):
        return lo
    for _ in range(max_expand):
        if feasible(hi):
            break
        lo, hi = hi, 2.0 * hi
    else:
        raise LmiError("bisection failed to bracket a feasible level")
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return hi


def write_sdpa(problem: LmiProblem, path) -> None:
    """Dump the problem in SDPA sparse format (``.dat-s``).

    The primal form is ``min c^T x  s.t.  sum_i x_i F_i - F_0 >= 0`` with one
    block per constraint; margins are folded into ``F_0``.
    """
    blocks = []
    for c, m in zip(problem.constraints, problem.margins()):
        n = c.expr.shape[0]
        sign = 1.0 if c.sense == ">>" else -1.0
        F0 = -(sign * c.expr.const - m * np.eye(n))
        Fi = sign * c.expr._coef()
        blocks.append((n, F0, Fi))
    cvec = np.zeros(problem.n_vars)
    if problem.objective is not None:
        cvec = problem.objective._coef()[0]
    lines = ['"written by gpiqc.lmi"', str(problem.n_vars), str(len(blocks)),
             " ".join(str(n) for n, _, _ in blocks),
             " ".join(repr(float(v)) for v in cvec)]
    for b, (n, F0, Fi) in enumerate(blocks, start=1):
        mats = [F0.ravel()] + [Fi[:, k] for k in range(problem.n_vars)]
        for k, vec in enumerate(mats):
            M = vec.reshape(n, n)
            for i in range(n):
                for j in range(i, n):
                    if M[i, j] != 0.0:
                        lines.append(f"{k} {b} {i + 1} {j + 1} {float(M[i, j])!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
