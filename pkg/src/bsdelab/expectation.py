"""Conditional-expectation backends for one backward step.

Every scheme step consumes three quantities at a state x: E_i[F], the Euler
weight E_i[F dW]/delta and the second-order weight E_i[F Z] with
Z = 4 dW/delta - 6 J/delta^2. Backends: deterministic Gauss-Hermite quadrature
on a state grid, cubature trees (degree 3 or 5), and a seeded Monte Carlo
oracle used for cross-checks.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.interpolate import CubicSpline

from . import strat
from .errors import (
    InvalidArgumentError,
    NumericalDomainError,
    ResourceLimitError,
)
from .mesh import Partition
from .problem import FbsdeProblem
from .strat import PiecewiseLinearPath

CERTIFICATION_TOL = 1e-12
DEFAULT_NODE_BUDGET = 1_000_000


# ---------------------------------------------------------------------------
# grid representation


class GridFunction:
    """Cubic-spline interpolant on a sorted 1D state grid.

    Evaluation at a node reproduces the stored value exactly. Outside the grid
    the boundary cubic is continued (`extrapolation="cubic"`, the default);
    clamping to the boundary value is available but injects O(sqrt(delta))
    defects near the edges that diffuse into the interior, so the solver does
    not use it.
    """

    def __init__(self, nodes, values, extrapolation="cubic"):
        nodes = np.asarray(nodes, dtype=float)
        values = np.asarray(values, dtype=float)
        if nodes.ndim != 1 or np.any(np.diff(nodes) <= 0.0):
            raise InvalidArgumentError("grid nodes must be strictly increasing 1D")
        if values.shape != nodes.shape:
            raise InvalidArgumentError("values must match nodes")
        if extrapolation not in ("cubic", "clamp"):
            raise InvalidArgumentError(f"unknown extrapolation {extrapolation!r}")
        self.nodes = nodes
        self.values = values
        self.extrapolation = extrapolation
        self._spline = CubicSpline(nodes, values, extrapolate=True)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        xq = np.clip(x, self.nodes[0], self.nodes[-1]) if self.extrapolation == "clamp" else x
        out = self._spline(xq)
        # snap exact node hits to the stored values
        idx = np.searchsorted(self.nodes, x)
        idx = np.minimum(idx, len(self.nodes) - 1)
        hit = self.nodes[idx] == x
        out = np.where(hit, self.values[idx], out)
        return float(out) if scalar else out


@dataclass(frozen=True)
class StepExpectations:
    """E_i[F], E_i[F dW]/delta and E_i[F Z] for one backward step (d = 1)."""

    plain: float
    euler_weighted: float
    second_order_weighted: float


# ---------------------------------------------------------------------------
# Gauss-Hermite grid backend


@lru_cache(maxsize=None)
def _gh_rule(order: int):
    x, w = hermgauss(order)
    return x, w / math.sqrt(math.pi)


def gauss_hermite_increments(delta: float, order: int):
    """Nodes and probability weights for E[g(dW)], dW ~ N(0, delta)."""
    if order < 2:
        raise InvalidArgumentError(f"need quadrature order >= 2, got {order}")
    x, w = _gh_rule(order)
    return math.sqrt(2.0 * delta) * x, w


def grid_quadrature_step(
    p: FbsdeProblem, F, x, delta: float, quad_order: int = 20
) -> StepExpectations:
    """Deterministic step expectations by Gauss-Hermite quadrature over dW.

    Because the transition endpoint depends on dW only, the J component of Z
    integrates analytically through E[J | dW] = (delta/2) dW (the residual is
    independent of dW and of F(x'), so it averages to zero), which collapses
    the second-order weight onto the Euler weight for this backend.
    """
    if not p.depends_on_increment_only:
        raise InvalidArgumentError(
            "grid quadrature needs a transition that depends on the increment only"
        )
    dw, w = gauss_hermite_increments(delta, quad_order)
    vals = np.asarray(F(p.transition(float(x), delta, dw)), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise NumericalDomainError("non-finite F values at quadrature nodes")
    plain = float(w @ vals)
    euler = float(w @ (vals * dw)) / delta
    return StepExpectations(plain, euler, euler)


def grid_weight_moments(delta: float, quad_order: int = 20):
    """(E[Z dW], E[Z J]) as the grid backend realizes them.

    E[Z dW] comes out of the quadrature machinery itself (identity functional
    on a pure-increment transition). E[Z J] splits into the projected part
    (delta/2) E[Z dW] seen by the quadrature plus the closed-form residual
    -6/delta^2 * Var(J | dW) = -delta/2 that defines this backend's treatment
    of Z.
    """
    from .problem import builtin

    p = builtin("bm_linear")
    step = grid_quadrature_step(p, lambda xp: xp, 0.0, delta, quad_order)
    z_dw = step.second_order_weighted
    z_j = 0.5 * delta * z_dw - 6.0 / delta**2 * (delta**3 / 12.0)
    return z_dw, z_j


# ---------------------------------------------------------------------------
# cubature formulas (one step)


@dataclass(frozen=True)
class CubatureFormula:
    """Weighted piecewise-linear paths matching iterated-integral moments.

    `paths` live on [0, delta] and start at zero; `weights` sum to one.
    """

    degree: int
    delta: float
    weights: np.ndarray
    paths: tuple

    @property
    def endpoints(self) -> np.ndarray:
        return np.array([float(pth.endpoint[0]) for pth in self.paths])

    @property
    def j_values(self) -> np.ndarray:
        """Pathwise J^(0,1) per path."""
        return np.array([strat.pathwise_integral((0, 1), pth) for pth in self.paths])

    @property
    def zetas(self) -> np.ndarray:
        """Pathwise weight functional Z = 4 dW/delta - 6 J/delta^2 per path."""
        return 4.0 * self.endpoints / self.delta - 6.0 * self.j_values / self.delta**2

    def weight_moments(self):
        """(E_cub[Z dW], E_cub[Z J]) evaluated pathwise."""
        z = self.zetas
        return float(self.weights @ (z * self.endpoints)), float(self.weights @ (z * self.j_values))

    def state_children(self):
        """Group paths by endpoint: (endpoints, weights, euler dW, aggregated Z).

        Paths sharing an endpoint lead to the same child state, so the tree
        merges them; their Z contributions aggregate weight-proportionally
        (the +-excursion pair at endpoint zero aggregates to exactly 0).
        """
        ends = self.endpoints
        zs = self.zetas
        uniq = np.unique(ends)
        cw = np.empty(len(uniq))
        cz = np.empty(len(uniq))
        for i, e in enumerate(uniq):
            m = ends == e
            cw[i] = self.weights[m].sum()
            cz[i] = (self.weights[m] * zs[m]).sum() / cw[i]
        return uniq, cw, uniq.copy(), cz


def _candidate_formulas(degree: int, delta: float):
    sd = math.sqrt(delta)
    line = np.array([0.0, delta])
    if degree == 3:
        yield CubatureFormula(
            3,
            delta,
            np.array([0.5, 0.5]),
            (
                PiecewiseLinearPath(line, np.array([0.0, -sd])),
                PiecewiseLinearPath(line, np.array([0.0, sd])),
            ),
        )
        return
    if degree != 5:
        raise InvalidArgumentError(f"cubature degree must be 3 or 5, got {degree}")
    s3 = math.sqrt(3.0 * delta)
    # primary: single-segment endpoint rule
    yield CubatureFormula(
        5,
        delta,
        np.array([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0]),
        (
            PiecewiseLinearPath(line, np.array([0.0, -s3])),
            PiecewiseLinearPath(line, np.array([0.0, 0.0])),
            PiecewiseLinearPath(line, np.array([0.0, s3])),
        ),
    )
    # fallback: same endpoints/weights, multi-segment paths; the zero-endpoint
    # mass splits into a +- pair of excursions so that E[(J^(0,1))^2] = delta^3/3
    # and E[dW^3 J^(0,1)] = 3 delta^3/2 hold alongside the degree-5 moments
    h = (3.0 - math.sqrt(5.0)) / (4.0 * math.sqrt(2.0)) * sd
    h2 = (1.0 + math.sqrt(5.0)) / (2.0 * math.sqrt(2.0)) * sd
    mtimes = delta * np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    bump = np.array([0.0, h, h2, h, 0.0])
    yield CubatureFormula(
        5,
        delta,
        np.array([1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0]),
        (
            PiecewiseLinearPath(line, np.array([0.0, -s3])),
            PiecewiseLinearPath(mtimes, -bump),
            PiecewiseLinearPath(mtimes, bump),
            PiecewiseLinearPath(line, np.array([0.0, s3])),
        ),
    )


def certification_words(degree: int):
    """All d = 1 words with weight <= degree (the certification set)."""
    return sorted(
        (w for w in strat.hierarchical_set(degree, 1) if w),
        key=lambda w: (len(w), w),
    )


def certify_cubature(formula: CubatureFormula, degree: int | None = None):
    """Compare one-step E_cub[J_a] against the exact moments for ||a|| <= degree.

    Returns (max absolute defect, {word: (cubature, exact)}).
    """
    degree = formula.degree if degree is None else degree
    details = {}
    worst = 0.0
    for word in certification_words(degree):
        cub = float(
            sum(
                w * strat.pathwise_integral(word, pth)
                for w, pth in zip(formula.weights, formula.paths)
            )
        )
        exact = strat.expected_iterated_integral(word, formula.delta)
        details[word] = (cub, exact)
        worst = max(worst, abs(cub - exact))
    return worst, details


def one_step_cubature(degree: int, delta: float) -> CubatureFormula:
    """Certified cubature formula for one step; rejects uncertified candidates.

    Candidates are tried in order (single-segment first); a formula is accepted
    only if every moment with ||a|| <= degree matches to 1e-12.
    """
    if delta <= 0.0:
        raise InvalidArgumentError(f"need delta > 0, got {delta}")
    last = None
    for formula in _candidate_formulas(degree, delta):
        defect, _ = certify_cubature(formula)
        scale = max(1.0, delta ** (degree / 2.0))
        if defect <= CERTIFICATION_TOL * scale:
            return formula
        last = (formula, defect)
    raise NumericalDomainError(
        f"no certified degree-{degree} construction; last defect {last[1]:.3e}"
    )


# ---------------------------------------------------------------------------
# cubature trees


@dataclass
class CubatureTree:
    """Level-array representation of the full cubature tree along a partition.

    Level i holds k^i nodes; the children of node p sit at indices p*k + c in
    level i+1. Edge data (dW, aggregated Z) is shared by all parents within a
    level because the one-step formula only depends on delta_i.
    """

    problem: FbsdeProblem
    partition: Partition
    degree: int
    states: list
    weights: list
    child_weights: np.ndarray
    edge_dw: list
    edge_zeta: list
    formulas: list

    @property
    def n_children(self) -> int:
        return len(self.child_weights)

    def root(self) -> "CubatureNode":
        return CubatureNode(self, 0, 0)

    def node(self, level: int, index: int) -> "CubatureNode":
        return CubatureNode(self, level, index)


class CubatureNode:
    """Lightweight view of one tree node."""

    def __init__(self, tree, level, index):
        self.tree = tree
        self.level = level
        self.index = index

    @property
    def state(self) -> float:
        return float(self.tree.states[self.level][self.index])

    @property
    def weight(self) -> float:
        return float(self.tree.weights[self.level][self.index])

    @property
    def children(self):
        k = self.tree.n_children
        if self.level >= len(self.tree.states) - 1:
            return []
        return [CubatureNode(self.tree, self.level + 1, self.index * k + c) for c in range(k)]

    def incoming_paths(self):
        """(relative weight, path segment) pairs for the edge from the parent."""
        if self.level == 0:
            return []
        k = self.tree.n_children
        child = self.index % k
        formula = self.tree.formulas[self.level - 1]
        end = self.tree.edge_dw[self.level - 1][child]
        out = []
        for w, pth in zip(formula.weights, formula.paths):
            if float(pth.endpoint[0]) == end:
                out.append((float(w), pth))
        total = sum(w for w, _ in out)
        return [(w / total, pth) for w, pth in out]


def build_cubature_tree(
    p: FbsdeProblem,
    partition: Partition,
    degree: int,
    node_budget: int = DEFAULT_NODE_BUDGET,
) -> CubatureTree:
    """Forward-sweep the certified one-step formula along the partition."""
    if p.d != 1:
        raise InvalidArgumentError("cubature trees are implemented for d = 1")
    n = partition.n
    probe = one_step_cubature(degree, float(partition.deltas[0]))
    k = len(probe.state_children()[0])
    total = (k ** (n + 1) - 1) // (k - 1)
    if total > node_budget:
        raise ResourceLimitError(
            f"cubature tree with n={n} needs {total} nodes, budget is {node_budget}"
        )
    states = [np.array([p.x0])]
    weights = [np.array([1.0])]
    edge_dw, edge_zeta, formulas = [], [], []
    for i in range(n):
        delta = float(partition.deltas[i])
        formula = one_step_cubature(degree, delta)
        ends, cw, dws, zetas = formula.state_children()
        formulas.append(formula)
        edge_dw.append(dws)
        edge_zeta.append(zetas)
        parent = np.repeat(states[i], k)
        inc = np.tile(dws, len(states[i]))
        states.append(np.asarray(p.transition(parent, delta, inc), dtype=float))
        weights.append(np.repeat(weights[i], k) * np.tile(cw, len(weights[i])))
    return CubatureTree(
        problem=p,
        partition=partition,
        degree=degree,
        states=states,
        weights=weights,
        child_weights=cw,
        edge_dw=edge_dw,
        edge_zeta=edge_zeta,
        formulas=formulas,
    )


def tree_step_expectations(node: CubatureNode, F) -> StepExpectations:
    """Step expectations over a node's children, weights normalized to the node."""
    tree = node.tree
    if node.level >= len(tree.states) - 1:
        raise InvalidArgumentError("node has no children")
    k = tree.n_children
    delta = float(tree.partition.deltas[node.level])
    sl = slice(node.index * k, (node.index + 1) * k)
    vals = np.asarray(F(tree.states[node.level + 1][sl]), dtype=float)
    cw = tree.child_weights
    dw = tree.edge_dw[node.level]
    zeta = tree.edge_zeta[node.level]
    return StepExpectations(
        float(cw @ vals),
        float(cw @ (vals * dw)) / delta,
        float(cw @ (vals * zeta)),
    )


# ---------------------------------------------------------------------------
# Monte Carlo backend (validation oracle)


def mc_step_expectations(
    p: FbsdeProblem, F, x, delta: float, sample_count: int, seed
) -> StepExpectations:
    """Sampled step expectations using the full 2D (dW, J) law for Z.

    No projection shortcut: this is the oracle that certifies the grid
    backend's analytic collapse of the second-order weight.
    """
    if sample_count < 1000:
        raise InvalidArgumentError(f"need sample_count >= 1000, got {sample_count}")
    dw, j = strat.sample_increments(delta, seed, sample_count, d=1)
    dw, j = dw[:, 0], j[:, 0]
    vals = np.asarray(F(p.transition(float(x), delta, dw)), dtype=float)
    zeta = 4.0 * dw / delta - 6.0 * j / delta**2
    return StepExpectations(
        float(vals.mean()),
        float((vals * dw).mean()) / delta,
        float((vals * zeta).mean()),
    )
