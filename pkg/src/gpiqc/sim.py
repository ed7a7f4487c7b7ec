"""Time-domain simulation of the closed loop with the true nonlinearity.

The loop is the weighted generalized plant closed over the controller,
``(p, w) -> (q, z, ...)``, with ``p = phi(q)`` applied channelwise. Since
``q`` taps the control signal before the nonlinearity, the closed loop has
no direct path from ``p`` to ``q`` for strictly proper plants and ``phi`` is
evaluated explicitly. A nonzero ``D_qp`` is handled by fixed-point
iteration.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .lti import StateSpace

log = logging.getLogger(__name__)

#: any state magnitude above this aborts the run
DIVERGENCE_LIMIT = 1e9
#: RK4 stability-region radius used to pick internal sub-steps
RK4_RADIUS = 2.5


class SimulationError(RuntimeError):
    pass


class AlgebraicLoopError(SimulationError):
    pass


@dataclass(frozen=True)
class SignalSpec:
    """Reference signal on every ``w`` channel.

    ``kind`` is ``"zero"``, ``"step"``, ``"sinusoid"`` or ``"bandlimited"``.
    Band-limited signals are sums of ``n_tones`` sinusoids with frequencies
    drawn uniformly from ``(0, cutoff]`` and random phases, scaled so that
    each channel's peak over the tones is at most ``amplitude``.
    """

    kind: str = "step"
    amplitude: float = 1.0
    frequency: float = 0.1
    phase: float = 0.0
    delay: float = 0.0
    cutoff: float = 0.5
    n_tones: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("zero", "step", "sinusoid", "bandlimited"):
            raise ValueError(f"unknown signal kind {self.kind!r}")

    def evaluate(self, t, width: int) -> np.ndarray:
        """Signal values at times ``t``, shape ``(len(t), width)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        a = float(self.amplitude)
        if self.kind == "zero" or a == 0.0:
            return np.zeros((t.size, width))
        if self.kind == "step":
            return np.repeat(np.where(t >= self.delay, a, 0.0)[:, None], width, axis=1)
        if self.kind == "sinusoid":
            ph = self.phase + np.arange(width) * np.pi / 2
            return a * np.sin(self.frequency * t[:, None] + ph[None, :])
        rng = np.random.default_rng(self.seed)
        om = rng.uniform(0.0, self.cutoff, size=(width, self.n_tones))
        om = np.maximum(om, 1e-3 * self.cutoff)
        ph = rng.uniform(0.0, 2 * np.pi, size=(width, self.n_tones))
        c = rng.standard_normal((width, self.n_tones))
        c *= a / np.sum(np.abs(c), axis=1, keepdims=True)
        return np.einsum("wk,twk->tw", c, np.sin(om[None] * t[:, None, None] + ph[None]))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class LureLoop:
    """Closed loop ``(p, w) -> (q, z, ...)`` with ``p = phi(q)`` channelwise."""

    cl: StateSpace
    phi: Callable[[np.ndarray], np.ndarray]
    fixed_point_iters: int = 100
    fixed_point_tol: float = 1e-12

    def __post_init__(self):
        for name in ("p", "w"):
            if not self.cl.has_input(name):
                raise SimulationError(f"closed loop lacks input {name!r}")
        for name in ("q", "z"):
            if not self.cl.has_output(name):
                raise SimulationError(f"closed loop lacks output {name!r}")
        if self.cl.width("p") != self.cl.width("q"):
            raise SimulationError("phi needs as many q as p channels")

    @property
    def direct_qp(self) -> np.ndarray:
        return self.cl.Dc("q", "p")

    @classmethod
    def from_experiment(cls, cfg, controller: StateSpace, phi=None) -> "LureLoop":
        """Distillation loop with the ground-truth nonlinearity of ``cfg``."""
        from . import experiment, synthesis
        plant = experiment.build_distcol_plant(cfg, monitor=True)
        f = experiment.ground_truth(cfg) if phi is None else phi
        return cls(synthesis.closed_loop(plant, controller), _channelwise(f))

    @classmethod
    def linear(cls, cl: StateSpace, gain) -> "LureLoop":
        """Loop with a fixed linear gain (scalar or per channel) in place of ``phi``."""
        g = np.asarray(gain, dtype=float)
        return cls(cl, lambda q: g * q)

    def solve_q(self, xq: np.ndarray) -> np.ndarray:
        """``q`` from ``q = xq + D_qp phi(q)`` where ``xq`` holds the other terms."""
        D = self.direct_qp
        if not np.any(D):
            return xq
        q = xq
        for _ in range(self.fixed_point_iters):
            q_new = xq + self.phi(q) @ D.T
            if np.max(np.abs(q_new - q)) <= self.fixed_point_tol * (1.0 + np.max(np.abs(q))):
                return q_new
            q = q_new
        raise AlgebraicLoopError("fixed-point iteration for q did not converge")


def _channelwise(f):
    if hasattr(f, "evaluator"):
        return f.evaluator()

    def phi(q):
        return np.asarray(f(np.ravel(q)), dtype=float).reshape(np.shape(q))
    return phi


@dataclass
class SimResult:
    t: np.ndarray
    channels: Dict[str, np.ndarray]
    diverged: bool
    max_abs_q: np.ndarray
    substeps: int
    meta: Dict[str, object] = field(default_factory=dict)

    @property
    def q_contained(self) -> bool:
        """Whether every ``q`` channel stayed inside ``[-1, 1]``."""
        return bool(np.all(self.max_abs_q <= 1.0))

    @property
    def bounded(self) -> bool:
        return not self.diverged

    @property
    def terminal_error(self) -> float:
        e = self.channels.get("e")
        return float(np.linalg.norm(e[-1])) if e is not None and len(e) else float("nan")

    def l2_norm(self, name: str) -> float:
        return l2_norm(self.t, self.channels[name])

    def summary(self) -> dict:
        return {"diverged": self.diverged, "bounded": self.bounded,
                "max_abs_q": self.max_abs_q.tolist(), "q_contained": self.q_contained,
                "terminal_error": self.terminal_error, "horizon": float(self.t[-1]),
                "samples": int(self.t.size), "substeps": self.substeps, **self.meta}

    def to_csv(self, path, stride: int = 1) -> None:
        """Write ``t`` and every channel; ``stride`` keeps every k-th sample."""
        names, cols = ["t"], [self.t[:, None]]
        for k, v in self.channels.items():
            names += [f"{k}{i + 1}" for i in range(v.shape[1])]
            cols.append(v)
        data = np.hstack(cols)[::max(1, int(stride))]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for row in data:
                w.writerow([repr(float(v)) for v in row])


def l2_norm(t: np.ndarray, sig: np.ndarray) -> float:
    """Finite-horizon L2 norm by the trapezoidal rule."""
    if t.size < 2:
        return 0.0
    sq = np.sum(np.asarray(sig, dtype=float).reshape(t.size, -1) ** 2, axis=1)
    return float(np.sqrt(np.trapezoid(sq, t)))


def _substeps(A: np.ndarray, h: float) -> int:
    if A.size == 0:
        return 1
    rho = float(np.max(np.abs(np.linalg.eigvals(A))))
    return max(1, int(np.ceil(h * rho / RK4_RADIUS)))


def _run(loop: LureLoop, refs: Sequence[SignalSpec], h: float, T: float,
         x0: Optional[np.ndarray] = None, chunk: int = 2000):
    """Batched RK4; one trajectory per reference, sampled every ``h``.

    Reference values at the sub-step nodes are precomputed in chunks of
    ``chunk`` output samples.
    """
    if not (h > 0 and T > h):
        raise SimulationError("need 0 < h < T")
    g = loop.cl
    nb, n = len(refs), g.n_states
    nw = g.width("w")
    A = g.A
    Bp, Bw = g.Bc("p"), g.Bc("w")
    Cq, Dqw = g.Cc("q"), g.Dc("q", "w")
    BpT = Bp.T.copy()
    # one product gives both the linear state derivative and q
    Mx = np.hstack([A.T, Cq.T])
    Mw = np.hstack([Bw.T, Dqw.T])
    phi = loop.phi
    explicit = not np.any(loop.direct_qp)
    m = _substeps(A, h)
    dt = h / m
    steps = int(round(T / h))
    t = np.arange(steps + 1) * h

    def rhs(x, wc):
        v = x @ Mx + wc
        q = v[:, n:] if explicit else loop.solve_q(v[:, n:])
        return v[:, :n] + phi(q) @ BpT

    X = np.zeros((steps + 1, nb, n))
    W = np.stack([r.evaluate(t, nw) for r in refs], axis=1)
    x = np.zeros((nb, n)) if x0 is None else np.broadcast_to(x0, (nb, n)).astype(float)
    X[0] = x
    diverged = np.zeros(nb, dtype=bool)
    last = steps
    for k0 in range(0, steps, chunk):
        k1 = min(k0 + chunk, steps)
        # half-step nodes from t[k0] to t[k1]
        nodes = t[k0] + np.arange(2 * m * (k1 - k0) + 1) * (dt / 2)
        Wn = np.stack([r.evaluate(nodes, nw) for r in refs], axis=1) @ Mw
        stop = False
        for k in range(k0, k1):
            base = 2 * m * (k - k0)
            for j in range(m):
                i = base + 2 * j
                w0, wm, w1 = Wn[i], Wn[i + 1], Wn[i + 2]
                f1 = rhs(x, w0)
                f2 = rhs(x + (dt / 2) * f1, wm)
                f3 = rhs(x + (dt / 2) * f2, wm)
                f4 = rhs(x + dt * f3, w1)
                x = x + (dt / 6) * (f1 + 2 * f2 + 2 * f3 + f4)
            X[k + 1] = x
            if not np.all(np.abs(x) <= DIVERGENCE_LIMIT):
                bad = ~np.all(np.abs(x) <= DIVERGENCE_LIMIT, axis=1)
                diverged |= bad
                last = k + 1
                log.warning("simulation diverged at t=%.3f", t[k + 1])
                stop = True
                break
        if stop:
            break
    return t[:last + 1], X[:last + 1], W[:last + 1], diverged, m


def _outputs(loop: LureLoop, X: np.ndarray, W: np.ndarray) -> Dict[str, np.ndarray]:
    g = loop.cl
    xq = X @ g.Cc("q").T + W @ g.Dc("q", "w").T
    q = np.stack([loop.solve_q(row) for row in xq])
    p = loop.phi(q)
    out = {"w": W, "q": q, "p": p}
    for name, _ in g.outputs:
        if name == "q":
            continue
        out[name] = X @ g.Cc(name).T + p @ g.Dc(name, "p").T + W @ g.Dc(name, "w").T
    return out


def simulate(loop: LureLoop, reference: SignalSpec, h: float = 0.01, T: float = 600.0,
             x0: Optional[np.ndarray] = None) -> SimResult:
    """Fixed-step RK4 simulation from rest (or ``x0``).

    The step ``h`` sets the output sampling; the integrator subdivides it
    when the closed loop has modes outside RK4's stability region at ``h``.
    Trajectories are returned for the reference ``r`` (the ``w`` channel),
    ``q``, ``p``, every closed-loop output, and the aliases ``u = q`` and
    ``y = e`` when an ``e`` monitor output exists.
    """
    t, X, W, div, m = _run(loop, [reference], h, T, x0)
    ch = _outputs(loop, X[:, 0], W[:, 0])
    ch = {"r": ch.pop("w"), **ch}
    ch["u"] = ch["q"]
    if "e" in ch:
        ch["y"] = ch["e"]
    maxq = np.max(np.abs(ch["q"]), axis=0)
    return SimResult(t, ch, bool(div[0]), maxq, m, {"reference": reference.to_dict()})


def empirical_l2_gain(loop: LureLoop, excitations: Sequence[SignalSpec], h: float = 0.01,
                      T: float = 600.0, detail: bool = False):
    """Largest ``||z|| / ||w||`` over the excitations (finite horizon, from rest).

    Zero excitations contribute a gain of 0. With ``detail`` the per-run
    gains, ``q`` peaks and divergence flags are returned as well.
    """
    if not excitations:
        return (0.0, []) if detail else 0.0
    t, X, W, div, _ = _run(loop, list(excitations), h, T)
    rows = []
    for b in range(len(excitations)):
        ch = _outputs(loop, X[:, b], W[:, b])
        nw = l2_norm(t, ch["w"])
        nz = l2_norm(t, ch["z"])
        gain = 0.0 if nw == 0.0 else nz / nw
        rows.append({"gain": gain, "max_abs_q": float(np.max(np.abs(ch["q"]))),
                     "diverged": bool(div[b])})
    if np.any(div):
        raise SimulationError("simulation diverged; the empirical gain is undefined")
    best = max(r["gain"] for r in rows)
    return (best, rows) if detail else best


def random_excitations(count: int, seed: int = 0, amplitude: float = 0.5,
                       cutoff_range=(0.005, 0.5)) -> List[SignalSpec]:
    """Band-limited excitations with random cutoffs (deterministic per seed)."""
    rng = np.random.default_rng(seed)
    lo, hi = np.log(cutoff_range[0]), np.log(cutoff_range[1])
    out = []
    for i in range(count):
        out.append(SignalSpec("bandlimited", amplitude=amplitude,
                              cutoff=float(np.exp(rng.uniform(lo, hi))),
                              seed=int(rng.integers(2 ** 31))))
    return out
