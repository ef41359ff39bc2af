"""Numerical checks of the leaf-count efficiency bounds of EPTree.

With fork positions uniform inside each branch and fixed generation
length, one tree with ``n`` fork points and ``t`` branches per point holds
``1 + n t`` leaves after one iteration (``1 + 2 n t`` after two) while
costing fewer tokens than the same number of independent chains.  The
ratio of leaves per token against independent chains is

* one iteration:  ``R(x) = (1 + x) / (1 + x / 2)`` with ``x = n t``
* two iterations: ``R(x) = (1 + 2x) / (1 + (1/2 + phi) x)``

where ``phi(n, t) = E[(1/2 + t/2 sum (1 - u_i)^2) / (1 + t sum (1 - u_i))]``
for ``u_i ~ U(0, 1)``.  ``phi`` lies in ``(1/3, ln 2 - 1/4]`` so every ratio
lies in ``[4/3, 12/5)``.

Monte Carlo uses numpy's counter-based Philox generator keyed by
``(seed, n, t)``; results do not depend on platform or chunking.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidConfig, OutOfDomain

log = logging.getLogger(__name__)

PHI_MAX = math.log(2.0) - 0.25
PHI_MIN = 1.0 / 3.0
LOWER = 4.0 / 3.0
UPPER = 12.0 / 5.0
_CHUNK = 1 << 16


def ratio_case_l1(x: float) -> float:
    if not x >= 1:
        raise OutOfDomain(f"x = n*t must be >= 1, got {x}")
    return (1.0 + x) / (1.0 + x / 2.0)


def ratio_case_l2(x: float, phi: float) -> float:
    if not x >= 1:
        raise OutOfDomain(f"x = n*t must be >= 1, got {x}")
    return (1.0 + 2.0 * x) / (1.0 + (0.5 + phi) * x)


def phi_integrand(u: np.ndarray, t: float) -> np.ndarray:
    """Integrand of ``phi`` for rows of ``1 - x_i`` values."""
    s1 = u.sum(axis=-1)
    s2 = (u * u).sum(axis=-1)
    return (0.5 + 0.5 * t * s2) / (1.0 + t * s1)


def _generator(seed: int, n: int, t: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), (n << 32) | t]))


def phi_monte_carlo(n: int, t: int, samples: int = 100_000, seed: int = 0) -> tuple[float, float]:
    """Sample mean and standard error of ``phi(n, t)``."""
    if n < 1 or t < 1:
        raise OutOfDomain("n and t must be >= 1")
    if samples < 1000:
        raise InvalidConfig("phi_monte_carlo needs at least 1000 samples")
    g = _generator(seed, n, t)
    total = total_sq = 0.0
    done = 0
    while done < samples:
        m = min(_CHUNK, samples - done)
        v = phi_integrand(g.random((m, n)), t)
        total += float(v.sum())
        total_sq += float((v * v).sum())
        done += m
    mean = total / samples
    var = max(total_sq / samples - mean * mean, 0.0) * samples / (samples - 1)
    return mean, math.sqrt(var / samples)


def phi_quadrature_n1(t: float = 1.0, panels: int = 1_000_000) -> float:
    """``phi(1, t)`` by the composite trapezoid rule."""
    u = np.linspace(0.0, 1.0, panels + 1)
    f = (0.5 + 0.5 * t * u * u) / (1.0 + t * u)
    h = 1.0 / panels
    return float(h * (f.sum() - 0.5 * (f[0] + f[-1])))


def ratio_case_l2_bounds(phi: float, slack: float = 0.0) -> tuple[float, float]:
    """``(6 / (3 + 2 phi), 4 / (1 + 2 phi))`` for ``phi`` in ``(1/3, ln 2 - 1/4]``.

    ``slack`` admits Monte Carlo estimates just outside the interval; they
    are clamped to the boundary with a warning.
    """
    if not (PHI_MIN < phi <= PHI_MAX):
        if PHI_MIN - slack < phi <= PHI_MAX + slack:
            log.warning("phi estimate %.6f outside (1/3, ln2 - 1/4]; clamped", phi)
            phi = min(max(phi, math.nextafter(PHI_MIN, 1.0)), PHI_MAX)
        else:
            raise OutOfDomain(f"phi = {phi} outside (1/3, ln 2 - 1/4]")
    return 6.0 / (3.0 + 2.0 * phi), 4.0 / (1.0 + 2.0 * phi)


@dataclass
class L1Case:
    xs: list[float]
    ratios: list[float]

    @property
    def min(self) -> float:
        return min(self.ratios)

    @property
    def sup(self) -> float:
        return max(self.ratios)


@dataclass
class L2Cell:
    n: int
    t: int
    phi: float
    std_error: float
    samples: int
    ratio: float
    lower: float
    upper: float


@dataclass
class TheoremReport:
    case_l1: L1Case
    case_l2: list[L2Cell]
    bridge: dict = field(default_factory=dict)
    verdict: dict = field(default_factory=dict)

    def check(self, sigmas: float = 3.0) -> dict:
        """Recompute every verdict from the stored numbers."""
        l1 = all(LOWER <= r < 2.0 for r in self.case_l1.ratios) and all(
            a < b for a, b in zip(self.case_l1.ratios, self.case_l1.ratios[1:]))
        phi_ok = all(PHI_MIN - sigmas * c.std_error < c.phi <= PHI_MAX + sigmas * c.std_error
                     for c in self.case_l2)
        l2 = True
        for c in self.case_l2:
            # ratio's sensitivity to phi is |dR/dphi| = x R / (1 + (1/2 + phi) x)
            x = c.n * c.t
            tol = sigmas * c.std_error * x * c.ratio / (1.0 + (0.5 + c.phi) * x)
            if not (c.lower - tol <= c.ratio < c.upper + tol and LOWER - tol <= c.ratio < UPPER):
                l2 = False
        verdict = {"case_l1": l1, "phi_interval": phi_ok, "case_l2": l2}
        if self.bridge:
            verdict["bridge"] = all(LOWER <= r < UPPER for rs in self.bridge.values() for r in rs)
        verdict["all"] = all(verdict.values())
        self.verdict = verdict
        return verdict

    def to_dict(self) -> dict:
        return {
            "case_l1": {"xs": self.case_l1.xs, "ratios": self.case_l1.ratios,
                        "min": self.case_l1.min, "sup": self.case_l1.sup},
            "case_l2": [asdict(c) for c in self.case_l2],
            "bridge": {",".join(map(str, k)): v for k, v in self.bridge.items()},
            "verdict": self.verdict,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"l=1: R in [{self.case_l1.min:.6f}, {self.case_l1.sup:.6f}] over {len(self.case_l1.xs)} x values",
                 f"{'n':>3} {'t':>3} {'phi':>10} {'se':>9} {'ratio':>8} {'lower':>8} {'upper':>8}"]
        for c in self.case_l2:
            lines.append(f"{c.n:>3} {c.t:>3} {c.phi:>10.6f} {c.std_error:>9.2e} {c.ratio:>8.5f} "
                         f"{c.lower:>8.5f} {c.upper:>8.5f}")
        for k, rs in self.bridge.items():
            lines.append(f"bridge {k}: min {min(rs):.4f} max {max(rs):.4f} over {len(rs)} seeds")
        lines.append("verdict: " + ", ".join(f"{k}={v}" for k, v in self.verdict.items()))
        return "\n".join(lines)


def default_grid() -> list[tuple[int, int]]:
    return [(n, t) for n in range(1, 9) for t in range(1, 5)]


def theorem_report(grid=None, samples: int = 100_000, seed: int = 0, x_max: float = 1e6,
                   bridge_shapes=(), bridge_seeds=range(20), bridge_length: int = 256,
                   bridge_trees: int = 32) -> TheoremReport:
    """Check both cases of the bound over ``grid`` and, optionally, the empirical bridge."""
    grid = default_grid() if grid is None else list(grid)
    if not grid:
        raise InvalidConfig("theorem_report needs a non-empty grid")
    xs = np.unique(np.concatenate([np.linspace(1.0, 100.0, 991), np.geomspace(100.0, x_max, 200)]))
    l1 = L1Case(xs.tolist(), [ratio_case_l1(float(x)) for x in xs])
    cells = []
    for n, t in grid:
        phi, se = phi_monte_carlo(n, t, samples, seed)
        lo, hi = ratio_case_l2_bounds(phi, slack=3.0 * se)
        cells.append(L2Cell(n, t, phi, se, samples, ratio_case_l2(n * t, phi), lo, hi))
    bridge = {}
    if bridge_shapes:
        from .evalx import efficiency_bridge
        bridge = efficiency_bridge(bridge_shapes, list(bridge_seeds), bridge_length, bridge_trees)
    report = TheoremReport(l1, cells, bridge)
    report.check()
    return report


def position_uniformity_sim(branch_length: int, events: int, seed: int = 0, bins: int = 20):
    """Uniform fork positions pushed through ``fork_position_histogram``."""
    from .evalx import fork_position_histogram

    if events < 1000:
        raise InvalidConfig("position_uniformity_sim needs at least 1000 events")
    g = np.random.Generator(np.random.Philox(key=seed))
    pos = g.integers(0, branch_length, events)
    return fork_position_histogram(((int(p), branch_length) for p in pos), bins)
