"""Certified sector bounds from a confidence band.

Given lower/upper band edges ``l(x) <= phi(x) <= u(x)`` on ``[a, b]``, the
sector ``[k1, k2]`` of ``phi`` satisfies

    k1 >= min over x of min(x l(x), x u(x)) / x^2
    k2 <= max over x of max(x l(x), x u(x)) / x^2.

The band is only evaluated on a grid. Between grid points the edges are
bounded with a user-supplied Lipschitz constant ``L`` (two-sided linear
envelope per cell), and the ratio is minimized exactly over each envelope,
so the result stays an over-approximation on ``[a, -rho] U [rho, b]``.
The open interval ``(-rho, rho)`` is excluded.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, List, Tuple

import numpy as np


class SectorError(ValueError):
    pass


@dataclass(frozen=True)
class SectorBounds:
    kappa1: float
    kappa2: float
    domain: Tuple[float, float] = (-1.0, 1.0)
    delta_share: float = 0.0
    grid_points: int = 0
    exclusion_radius: float = 0.0
    lipschitz: float = 0.0

    def __post_init__(self):
        if self.kappa1 > self.kappa2:
            raise SectorError(f"kappa1={self.kappa1} exceeds kappa2={self.kappa2}")

    @property
    def sign_ok(self) -> bool:
        """Whether ``kappa1 <= 0 <= kappa2`` (needed by the multiplier set)."""
        return self.kappa1 <= 0.0 <= self.kappa2

    @property
    def width(self) -> float:
        return self.kappa2 - self.kappa1

    def contains(self, other: "SectorBounds") -> bool:
        return self.kappa1 <= other.kappa1 and other.kappa2 <= self.kappa2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domain"] = list(self.domain)
        d["sign_ok"] = self.sign_ok
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SectorBounds":
        d = {k: v for k, v in d.items() if k != "sign_ok"}
        d["domain"] = tuple(d.get("domain", (-1.0, 1.0)))
        return cls(**d)


@dataclass(frozen=True)
class FunctionBand:
    """Band given by two callables; used for synthetic and exact bands."""

    lower: Callable
    upper: Callable

    def band(self, x):
        x = np.asarray(x, dtype=float)
        return np.asarray(self.lower(x), dtype=float), np.asarray(self.upper(x), dtype=float)


def _cell_ratio_min(t: np.ndarray, g: np.ndarray, L: float) -> float:
    """Lower bound of ``g(s)/s`` over ``s in [t[0], t[-1]]``, ``t > 0``.

    ``g`` is known on the grid ``t`` and is ``L``-Lipschitz in between. On a
    cell the lower envelope ``max(g0 - L (s - t0), g1 - L (t1 - s))`` is
    piecewise linear, and ``(alpha + beta s)/s`` is monotone on each piece,
    so the minimum sits at a cell end or at the envelope kink.
    """
    best = float(np.min(g / t))
    if L <= 0.0 or t.size < 2:
        return best
    t0, t1 = t[:-1], t[1:]
    g0, g1 = g[:-1], g[1:]
    kink = (g0 - g1 + L * (t0 + t1)) / (2.0 * L)
    kink = np.clip(kink, t0, t1)
    env = np.maximum(g0 - L * (kink - t0), g1 - L * (t1 - kink))
    return min(best, float(np.min(env / kink)))


def _grid(a: float, b: float, grid_points: int, rho: float) -> Tuple[np.ndarray, np.ndarray]:
    """Positive-side and mirrored negative-side grids, both starting at ``rho``.

    The uniform grid is merged with a geometric one whose relative spacing
    matches the uniform spacing at the domain edge, so cells near the
    exclusion radius are no coarser relative to ``|x|`` than far out.
    """
    x = np.linspace(a, b, grid_points)
    h = x[1] - x[0]

    def side(end, uniform):
        ratio = 1.0 + h / end
        k = int(np.ceil(np.log(end / rho) / np.log(ratio)))
        geo = rho * ratio ** np.arange(k + 1)
        return np.unique(np.concatenate([[rho, end], uniform, geo[geo < end]]))

    return side(b, x[x > rho]), side(-a, -x[x < -rho])


def extract_sector(post, a: float = -1.0, b: float = 1.0, grid_points: int = 2001,
                   lipschitz: float = 0.0, exclusion_radius: float = 1e-2,
                   delta_share: float = 0.0) -> SectorBounds:
    """Sector bounds implied by ``post.band`` on ``[a, b]`` minus ``(-rho, rho)``.

    ``lipschitz`` bounds the slope of both band edges; with ``0`` only the
    grid values are used and the result is exact for bands whose edge ratios
    are monotone between grid points (e.g. linear edges).
    """
    rho = float(exclusion_radius)
    if not a < 0.0 < b:
        raise SectorError("domain must contain 0 in its interior")
    if grid_points < 3:
        raise SectorError("need at least 3 grid points")
    if lipschitz < 0:
        raise SectorError("Lipschitz constant must be non-negative")
    if not 0.0 < rho < min(-a, b):
        raise SectorError("exclusion radius must lie in (0, min(|a|, b))")
    pos, neg = _grid(a, b, grid_points, rho)
    try:
        lo_p, hi_p = post.band(pos)
        lo_n, hi_n = post.band(-neg)
    except Exception as exc:
        raise SectorError(f"band evaluation failed: {exc}") from exc
    if not all(np.all(np.isfinite(v)) for v in (lo_p, hi_p, lo_n, hi_n)):
        raise SectorError("band evaluation returned non-finite values")
    L = float(lipschitz)
    # for x = -s < 0: u(x)/x = -u(-s)/s and l(x)/x = -l(-s)/s
    k1 = min(_cell_ratio_min(pos, lo_p, L), _cell_ratio_min(neg, -hi_n, L))
    k2 = -min(_cell_ratio_min(pos, -hi_p, L), _cell_ratio_min(neg, lo_n, L))
    return SectorBounds(float(k1), float(k2), (float(a), float(b)), float(delta_share),
                        int(grid_points), rho, L)


def scan_sector(f: Callable, a: float = -1.0, b: float = 1.0, n: int = 100_001) -> SectorBounds:
    """Brute-force sector of a function: extreme values of ``f(x)/x`` on a grid."""
    x = np.linspace(a, b, n)
    x = x[x != 0.0]
    r = np.asarray(f(x), dtype=float) / x
    return SectorBounds(float(r.min()), float(r.max()), (float(a), float(b)), grid_points=n)


def split_delta(total_delta: float, n_channels: int, shared_function: bool) -> List[float]:
    """Per-channel confidence budgets.

    A single learned function reused on every channel needs one budget;
    independent learned functions split it by the union bound.
    """
    if not 0.0 < total_delta < 1.0:
        raise SectorError("delta must lie in (0, 1)")
    if n_channels < 1:
        raise SectorError("need at least one channel")
    if shared_function:
        return [float(total_delta)]
    return [total_delta / n_channels] * n_channels


def edge_slope(post, a: float = -1.0, b: float = 1.0, n: int = 20001) -> float:
    """Largest finite-difference slope of the band edges (a diagnostic for ``L``)."""
    x = np.linspace(a, b, n)
    lo, hi = post.band(x)
    h = x[1] - x[0]
    return float(max(np.max(np.abs(np.diff(lo))), np.max(np.abs(np.diff(hi)))) / h)
