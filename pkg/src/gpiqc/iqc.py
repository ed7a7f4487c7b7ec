"""Full-block static multipliers for diagonally repeated sector nonlinearities.

For ``p = diag(phi_1(q_1), ..., phi_np(q_np))`` with each ``phi_i`` in the
sector ``[k1_i, k2_i]`` (``k1_i <= 0 <= k2_i``) the admissible multipliers are
the symmetric ``P`` with

    [I; Theta]^T P [I; Theta] >= 0   for every vertex Theta of the gain box,
    [0; I]^T P [0; I] <= 0.

Concavity of the vertex form in ``Theta`` (because ``P22 <= 0``) extends the
vertex conditions to the whole box.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy import linalg

from . import lmi
from .sector import SectorBounds

log = logging.getLogger(__name__)

#: Psi_2 condition numbers above this make the plant transformation unusable
PSI2_COND_LIMIT = 1e12


class IqcError(ValueError):
    pass


class AssumptionViolation(IqcError):
    """A sector does not bracket zero."""


class FactorizationError(IqcError):
    pass


@dataclass(frozen=True)
class MultiplierSet:
    """Vertex description of the full-block multiplier set.

    ``n_q == n_p`` here since each channel carries one scalar nonlinearity.
    """

    kappa1: np.ndarray
    kappa2: np.ndarray

    @property
    def n_p(self) -> int:
        return int(self.kappa1.size)

    @property
    def n_q(self) -> int:
        return int(self.kappa1.size)

    @property
    def vertices(self) -> List[np.ndarray]:
        pairs = [(a, b) for a, b in zip(self.kappa1, self.kappa2)]
        return [np.diag(np.array(t, dtype=float)) for t in itertools.product(*pairs)]

    def vertex_forms(self, P: np.ndarray) -> List[np.ndarray]:
        I = np.eye(self.n_q)
        out = []
        for Th in self.vertices:
            T = np.vstack([I, Th])
            out.append(T.T @ P @ T)
        return out

    def add_constraints(self, prob: lmi.LmiProblem, name: str = "P",
                        margin: Optional[float] = 0.0) -> lmi.AffineExpr:
        """Declare a multiplier variable on ``prob`` and constrain it to the set."""
        n = self.n_q + self.n_p
        P = prob.symmetric(name, n)
        I = np.eye(self.n_q)
        E2 = np.hstack([np.zeros((self.n_p, self.n_q)), np.eye(self.n_p)])
        for k, Th in enumerate(self.vertices):
            T = np.vstack([I, Th])
            prob.require_psd(T.T @ P @ T, margin=margin, name=f"{name}_vertex{k}")
        prob.require_nsd(E2 @ P @ E2.T, margin=margin, name=f"{name}_22")
        return P

    def to_dict(self) -> dict:
        return {"kappa1": self.kappa1.tolist(), "kappa2": self.kappa2.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MultiplierSet":
        return cls(np.asarray(d["kappa1"], float), np.asarray(d["kappa2"], float))


def build_multiplier_set(sectors: Sequence[SectorBounds]) -> MultiplierSet:
    """Multiplier set for one sector per uncertainty channel."""
    if len(sectors) == 0:
        raise IqcError("need at least one uncertainty channel")
    for i, s in enumerate(sectors):
        if not s.sign_ok:
            raise AssumptionViolation(
                f"channel {i}: sector [{s.kappa1:.4g}, {s.kappa2:.4g}] does not contain 0")
    k1 = np.array([s.kappa1 for s in sectors], dtype=float)
    k2 = np.array([s.kappa2 for s in sectors], dtype=float)
    return MultiplierSet(k1, k2)


@dataclass(frozen=True)
class MultiplierValue:
    P: np.ndarray
    n_q: int

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] <= self.n_q:
            raise IqcError(f"bad multiplier shape {P.shape} for n_q={self.n_q}")
        object.__setattr__(self, "P", 0.5 * (P + P.T))

    @property
    def P11(self):
        return self.P[:self.n_q, :self.n_q]

    @property
    def P12(self):
        return self.P[:self.n_q, self.n_q:]

    @property
    def P22(self):
        return self.P[self.n_q:, self.n_q:]

    def to_dict(self) -> dict:
        return {"P": self.P.tolist(), "n_q": self.n_q}

    @classmethod
    def from_dict(cls, d: dict) -> "MultiplierValue":
        return cls(np.asarray(d["P"], float), int(d["n_q"]))


def check_membership(P: MultiplierValue, mset: MultiplierSet, tol: float = 1e-7) -> bool:
    """Vertex forms are ``>= -tol`` and ``P22 <= tol``."""
    if P.P.shape[0] != mset.n_q + mset.n_p or P.n_q != mset.n_q:
        raise IqcError("multiplier and set dimensions differ")
    for F in mset.vertex_forms(P.P):
        if np.linalg.eigvalsh(F)[0] < -tol:
            return False
    return bool(np.linalg.eigvalsh(P.P22)[-1] <= tol)


@dataclass(frozen=True)
class Factorization:
    """``P + E = Psi^T diag(I, -I) Psi`` with ``Psi = [[Psi1, Psi3], [0, Psi2]]``."""

    psi1: np.ndarray
    psi2: np.ndarray
    psi3: np.ndarray
    eps: float
    form: str = "diag"

    @property
    def psi(self) -> np.ndarray:
        nq, npp = self.psi3.shape
        return np.block([[self.psi1, self.psi3], [np.zeros((npp, nq)), self.psi2]])

    @property
    def p_hat(self) -> np.ndarray:
        nq, npp = self.psi3.shape
        if self.form == "diag":
            return linalg.block_diag(np.eye(nq), -np.eye(npp))
        return np.block([[np.zeros((nq, npp)), np.eye(nq)], [np.eye(npp), np.zeros((npp, nq))]])

    def reconstruct(self) -> np.ndarray:
        S = self.psi
        return S.T @ self.p_hat @ S

    @property
    def psi2_cond(self) -> float:
        return float(np.linalg.cond(self.psi2))

    def to_dict(self) -> dict:
        return {"psi1": self.psi1.tolist(), "psi2": self.psi2.tolist(),
                "psi3": self.psi3.tolist(), "eps": self.eps, "form": self.form,
                "psi2_cond": self.psi2_cond}


def identity_factorization(n_q: int, n_p: int) -> Factorization:
    return Factorization(np.eye(n_q), np.eye(n_p), np.zeros((n_q, n_p)), 0.0)


def factorize(P: MultiplierValue, eps: Optional[float] = None, retries: int = 4) -> Factorization:
    """Schur-complement factorization of ``P`` against ``diag(I, -I)``.

    ``eps`` defaults to ``1e-8 (1 + ||P||)`` and is doubled on each failed
    Cholesky attempt.
    """
    M = P.P
    nq = P.n_q
    npp = M.shape[0] - nq
    scale = 1.0 + np.linalg.norm(M, 2)
    e = 1e-8 * scale if eps is None else float(eps)
    lam11 = np.linalg.eigvalsh(P.P11)[0]
    lam22 = np.linalg.eigvalsh(P.P22)[-1]
    if lam11 < -1e-6 * scale or lam22 > 1e-6 * scale:
        log.warning("multiplier outside the set: min eig P11 %.3e, max eig P22 %.3e", lam11, lam22)
    last = None
    for attempt in range(retries + 1):
        try:
            # upper-triangular R with R^T R = P11 + eps I
            psi1 = linalg.cholesky(P.P11 + e * np.eye(nq), lower=False)
            psi3 = linalg.solve_triangular(psi1, P.P12, trans="T", lower=False)
            S = psi3.T @ psi3 - P.P22
            psi2 = linalg.cholesky(0.5 * (S + S.T) + e * np.eye(npp), lower=False)
            return Factorization(psi1, psi2, psi3, e)
        except linalg.LinAlgError as exc:
            last = exc
            log.debug("factorization attempt %d with eps=%.3e failed", attempt, e)
            e *= 2.0
    raise FactorizationError(f"Cholesky failed after {retries} retries (eps={e / 2:.3e})") from last
