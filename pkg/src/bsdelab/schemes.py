"""Backward recursions for the BSDE pair (Y, Z).

Two schemes: the classical first-order backward Euler recursion, and the
second-order recursion that trapezoid-averages the driver between partition
points (Crank-Nicolson in time) and extracts Z with the weight functional
Z_i = 4 dW/delta - 6 J/delta^2 applied to Psi = Y_{i+1} + (delta/2) f(t_{i+1}, .).

Terminal initialization follows the problem's smoothness class: smooth data
seeds z_n = grad(Phi) V; Lipschitz data seeds z_n = 0 and takes the first
backward step in Euler fashion.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss

from . import expectation as xp
from . import strat
from .errors import FixedPointError, InvalidArgumentError, StepSizeError
from .mesh import Partition
from .problem import FbsdeProblem, default_probes, state_grid

FP_TOL = 1e-12
FP_MAX_ITER = 50


def implicit_solve(const, z, t, x, driver, theta_delta, lipschitz, tol=FP_TOL, max_iter=FP_MAX_ITER):
    """Solve y = const + theta_delta * f(t, x, y, z) by Picard iteration from const.

    Requires theta_delta * lipschitz < 1 (checked before iterating). Works
    elementwise on arrays. Raises FixedPointError with the last residual if
    max_iter is exhausted.
    """
    contraction = theta_delta * lipschitz
    if contraction >= 1.0:
        raise StepSizeError(
            f"implicit step not contractive: theta*delta*K = {contraction:.6g} >= 1"
        )
    y = np.asarray(const, dtype=float)
    for _ in range(max_iter):
        y_new = const + theta_delta * np.asarray(driver(t, x, y, z), dtype=float)
        resid = float(np.max(np.abs(y_new - const - theta_delta * np.asarray(driver(t, x, y_new, z), dtype=float))))
        y = y_new
        if resid <= tol:
            return y
    raise FixedPointError(f"Picard iteration did not reach tol={tol}", residual=resid)


# ---------------------------------------------------------------------------
# value-field containers


@dataclass
class GridValueFields:
    """Discrete (y_i, z_i) slices as functions of the forward state.

    Slice n holds the exact terminal callables; earlier slices are cubic-grid
    interpolants produced by the backward sweep.
    """

    problem: FbsdeProblem
    partition: Partition
    scheme: str
    backend: str
    terminal_mode: str
    nodes: np.ndarray
    ys: list = field(default_factory=list)
    zs: list = field(default_factory=list)

    @property
    def kind(self):
        return "grid"


@dataclass
class TreeValueFields:
    """Per-node (y, z) values on a cubature tree, one array per level."""

    problem: FbsdeProblem
    partition: Partition
    scheme: str
    backend: str
    terminal_mode: str
    tree: xp.CubatureTree
    y_levels: list = field(default_factory=list)
    z_levels: list = field(default_factory=list)

    @property
    def kind(self):
        return "tree"


# ---------------------------------------------------------------------------
# backend slice sweeps (vectorized over all representative states at once)


class _QuadSlice:
    """One backward step of the grid backend: shared quadrature transitions."""

    def __init__(self, p, nodes, delta, quad_order):
        dw, w = xp.gauss_hermite_increments(delta, quad_order)
        self.delta = delta
        self.dw = dw
        self.w = w
        self.x_next = p.transition(nodes[:, None], delta, dw[None, :])

    def plain(self, vals):
        return vals @ self.w

    def euler_weighted(self, vals):
        return (vals * self.dw) @ self.w / self.delta

    # endpoint depends on the increment only, so E[F Z] collapses to E[F dW]/delta
    second_weighted = euler_weighted


class _McSlice:
    """One backward step estimated from seeded (dW, J) draws, full 2D weight."""

    def __init__(self, p, nodes, delta, samples, seed, step_index):
        dw, j = strat.sample_increments(delta, np.random.SeedSequence([seed, step_index]), samples, d=1)
        self.delta = delta
        self.dw = dw[:, 0]
        self.zeta = 4.0 * self.dw / delta - 6.0 * j[:, 0] / delta**2
        self.x_next = p.transition(nodes[:, None], delta, self.dw[None, :])

    def plain(self, vals):
        return vals.mean(axis=-1)

    def euler_weighted(self, vals):
        return (vals * self.dw).mean(axis=-1) / self.delta

    def second_weighted(self, vals):
        return (vals * self.zeta).mean(axis=-1)


class _TreeSlice:
    """One backward step on the cubature tree: children reshaped per parent."""

    def __init__(self, tree, level):
        k = tree.n_children
        self.delta = float(tree.partition.deltas[level])
        self.cw = tree.child_weights
        self.dw = tree.edge_dw[level]
        self.zeta = tree.edge_zeta[level]
        self.x_next = tree.states[level + 1].reshape(-1, k)

    def reshape(self, level_values):
        return level_values.reshape(self.x_next.shape)

    def plain(self, vals):
        return vals @ self.cw

    def euler_weighted(self, vals):
        return (vals * self.dw) @ self.cw / self.delta

    def second_weighted(self, vals):
        return (vals * self.zeta) @ self.cw


def _check_contraction(partition, lipschitz, theta, label):
    worst = float(np.max(partition.deltas)) * lipschitz * theta
    if worst >= 1.0:
        i = int(np.argmax(partition.deltas))
        raise StepSizeError(
            f"{label}: delta_{i + 1}*K*{theta:g} = {worst:.6g} >= 1 on step {i + 1}"
        )


def _zero_field(x):
    return np.zeros_like(np.asarray(x, dtype=float))


def _euler_slice(p, sl, y_next, t_i, nodes_or_states, fp_tol, fp_max_iter):
    """Shared Euler backward step: z = E[Y dW]/delta, implicit full-delta y."""
    vals = np.asarray(y_next(sl.x_next), dtype=float)
    z_vals = sl.euler_weighted(vals)
    y_vals = implicit_solve(
        sl.plain(vals), z_vals, t_i, nodes_or_states, p.driver, sl.delta, p.lipschitz,
        tol=fp_tol, max_iter=fp_max_iter,
    )
    return y_vals, z_vals


def _cn_slice(p, sl, y_next, z_next, t_i, t_next, nodes_or_states, fp_tol, fp_max_iter):
    """Second-order step: Z from the weighted Psi functional, trapezoidal y."""
    yv = np.asarray(y_next(sl.x_next), dtype=float)
    zv = np.asarray(z_next(sl.x_next), dtype=float)
    fv = np.asarray(p.driver(t_next, sl.x_next, yv, zv), dtype=float) + np.zeros_like(yv)
    half = 0.5 * sl.delta
    z_vals = sl.second_weighted(yv + half * fv)
    y_vals = implicit_solve(
        sl.plain(yv) + half * sl.plain(fv), z_vals, t_i, nodes_or_states,
        p.driver, half, p.lipschitz, tol=fp_tol, max_iter=fp_max_iter,
    )
    return y_vals, z_vals


def _resolve_terminal_mode(p, terminal_mode):
    mode = terminal_mode.lower()
    if mode == "auto":
        mode = "c2" if p.smoothness == "C2_smooth" else "c1"
    if mode not in ("c1", "c2"):
        raise InvalidArgumentError(f"unknown terminal mode {terminal_mode!r}")
    if mode == "c2" and p.terminal_gradient is None:
        raise InvalidArgumentError("C2 initialization needs a terminal gradient")
    return mode


def _grid_slices(p, nodes, partition, backend, opts):
    quad_order = opts.get("quad_order", 20)
    mc_samples = opts.get("mc_samples", 20_000)
    seed = opts.get("seed", 0)

    def make(i):
        delta = float(partition.deltas[i])
        if backend == "grid":
            return _QuadSlice(p, nodes, delta, quad_order)
        return _McSlice(p, nodes, delta, mc_samples, seed, i)

    return make


def euler_backward(p: FbsdeProblem, partition: Partition, backend: str = "grid", **opts):
    """First-order backward Euler recursion; returns value fields per slice.

    Options: grid_nodes, padding, quad_order (grid); mc_samples, seed (mc);
    node_budget (trees); fp_tol, fp_max_iter.
    """
    _check_contraction(partition, p.lipschitz, 1.0, "euler scheme")
    fp_tol = opts.get("fp_tol", FP_TOL)
    fp_max_iter = opts.get("fp_max_iter", FP_MAX_ITER)
    n = partition.n
    pts = partition.points

    if backend in ("cubature3", "cubature5"):
        tree = _tree_for(p, partition, backend, opts)
        fields = TreeValueFields(p, partition, "euler", backend, "c1", tree)
        y = np.asarray(p.terminal(tree.states[n]), dtype=float)
        z = np.zeros_like(y)
        fields.y_levels = [None] * (n + 1)
        fields.z_levels = [None] * (n + 1)
        fields.y_levels[n], fields.z_levels[n] = y, z
        for i in range(n - 1, -1, -1):
            sl = _TreeSlice(tree, i)
            y_fn = lambda xs: fields.y_levels[i + 1].reshape(xs.shape)
            yv, zv = _euler_slice(p, sl, y_fn, pts[i], tree.states[i], fp_tol, fp_max_iter)
            fields.y_levels[i], fields.z_levels[i] = yv, zv
        return fields

    if backend not in ("grid", "mc"):
        raise InvalidArgumentError(f"unknown backend {backend!r}")
    nodes = state_grid(p, opts.get("grid_nodes", 401), opts.get("padding", 6.0))
    make_slice = _grid_slices(p, nodes, partition, backend, opts)
    fields = GridValueFields(p, partition, "euler", backend, "c1", nodes)
    fields.ys = [None] * (n + 1)
    fields.zs = [None] * (n + 1)
    fields.ys[n], fields.zs[n] = p.terminal, _zero_field
    for i in range(n - 1, -1, -1):
        sl = make_slice(i)
        yv, zv = _euler_slice(p, sl, fields.ys[i + 1], pts[i], nodes, fp_tol, fp_max_iter)
        fields.ys[i] = xp.GridFunction(nodes, yv)
        fields.zs[i] = xp.GridFunction(nodes, zv)
    return fields


def second_order_backward(
    p: FbsdeProblem,
    partition: Partition,
    backend: str = "grid",
    terminal_mode: str = "auto",
    **opts,
):
    """Second-order backward recursion (trapezoidal driver + weighted Z update).

    Under C1 initialization the last step is taken with the Euler formulas
    verbatim (full-delta implicit weight) and the recursion needs n >= 2;
    under C2 it starts directly at i = n-1 from z_n = grad(Phi) V.
    """
    mode = _resolve_terminal_mode(p, terminal_mode)
    n = partition.n
    if mode == "c1" and n < 2:
        raise InvalidArgumentError("C1 initialization needs n >= 2 (last step is Euler-style)")
    _check_contraction(partition, p.lipschitz, 0.5, "second-order scheme")
    if mode == "c1" and float(partition.deltas[-1]) * p.lipschitz >= 1.0:
        raise StepSizeError(
            f"C1 Euler step not contractive: delta_n*K = {float(partition.deltas[-1]) * p.lipschitz:.6g} >= 1"
        )
    fp_tol = opts.get("fp_tol", FP_TOL)
    fp_max_iter = opts.get("fp_max_iter", FP_MAX_ITER)
    pts = partition.points

    if backend in ("cubature3", "cubature5"):
        tree = _tree_for(p, partition, backend, opts)
        fields = TreeValueFields(p, partition, "cn2", backend, mode, tree)
        fields.y_levels = [None] * (n + 1)
        fields.z_levels = [None] * (n + 1)
        xs_n = tree.states[n]
        fields.y_levels[n] = np.asarray(p.terminal(xs_n), dtype=float)
        if mode == "c2":
            fields.z_levels[n] = np.asarray(p.terminal_gradient(xs_n), dtype=float) * np.asarray(
                p.diffusion(xs_n), dtype=float
            )
            start = n - 1
        else:
            fields.z_levels[n] = np.zeros_like(fields.y_levels[n])
            sl = _TreeSlice(tree, n - 1)
            y_fn = lambda xs: fields.y_levels[n].reshape(xs.shape)
            yv, zv = _euler_slice(p, sl, y_fn, pts[n - 1], tree.states[n - 1], fp_tol, fp_max_iter)
            fields.y_levels[n - 1], fields.z_levels[n - 1] = yv, zv
            start = n - 2
        for i in range(start, -1, -1):
            sl = _TreeSlice(tree, i)
            y_fn = lambda xs: fields.y_levels[i + 1].reshape(xs.shape)
            z_fn = lambda xs: fields.z_levels[i + 1].reshape(xs.shape)
            yv, zv = _cn_slice(p, sl, y_fn, z_fn, pts[i], pts[i + 1], tree.states[i], fp_tol, fp_max_iter)
            fields.y_levels[i], fields.z_levels[i] = yv, zv
        return fields

    if backend not in ("grid", "mc"):
        raise InvalidArgumentError(f"unknown backend {backend!r}")
    nodes = state_grid(p, opts.get("grid_nodes", 401), opts.get("padding", 6.0))
    make_slice = _grid_slices(p, nodes, partition, backend, opts)
    fields = GridValueFields(p, partition, "cn2", backend, mode, nodes)
    fields.ys = [None] * (n + 1)
    fields.zs = [None] * (n + 1)
    fields.ys[n] = p.terminal
    if mode == "c2":
        grad, diff = p.terminal_gradient, p.diffusion
        fields.zs[n] = lambda x: np.asarray(grad(x), dtype=float) * np.asarray(diff(x), dtype=float)
        start = n - 1
    else:
        fields.zs[n] = _zero_field
        sl = make_slice(n - 1)
        yv, zv = _euler_slice(p, sl, fields.ys[n], pts[n - 1], nodes, fp_tol, fp_max_iter)
        fields.ys[n - 1] = xp.GridFunction(nodes, yv)
        fields.zs[n - 1] = xp.GridFunction(nodes, zv)
        start = n - 2
    for i in range(start, -1, -1):
        sl = make_slice(i)
        yv, zv = _cn_slice(
            p, sl, fields.ys[i + 1], fields.zs[i + 1], pts[i], pts[i + 1], nodes, fp_tol, fp_max_iter
        )
        fields.ys[i] = xp.GridFunction(nodes, yv)
        fields.zs[i] = xp.GridFunction(nodes, zv)
    return fields


def _tree_for(p, partition, backend, opts):
    degree = 3 if backend == "cubature3" else 5
    return xp.build_cubature_tree(
        p, partition, degree, node_budget=opts.get("node_budget", xp.DEFAULT_NODE_BUDGET)
    )


# ---------------------------------------------------------------------------
# error metric


@dataclass
class ErrorMetricReport:
    """Theorem-2-style error summary: per-index rows and maxima over i <= n-2."""

    per_index: list  # (i, err_y_i, err_z_i, bracket_i)
    metric_t2: float
    err_y: float
    err_z: float


def error_metric(fields, reference=None, probes=None) -> ErrorMetricReport:
    """Evaluate |Y - Y^pi|^2 + (delta_{i+1}/4d) |Z - Z^pi|^2 against a reference.

    The max is taken over indices i <= n-2 exactly as in the convergence
    theorem. Grid fields evaluate the bracket at probe states (default: 21
    states across the central half of the spatial grid) and report sup-norms;
    tree fields average it with the cubature weights of each level (level 0 is
    the root exactly).
    """
    p = fields.problem
    if reference is None:
        if p.reference_u is None or p.reference_z is None:
            raise InvalidArgumentError("no reference solution available")
        ref_u, ref_z = p.reference_u, p.reference_z
    else:
        ref_u, ref_z = reference
    part = fields.partition
    n = part.n
    deltas = part.deltas
    pts = part.points
    four_d = 4.0 * p.d
    # theorem range is i <= n-2; the degenerate n = 1 keeps its only slice
    last = n - 1 if n > 1 else 1
    rows = []
    if fields.kind == "grid":
        if probes is None:
            probes = default_probes(p)
        probes = np.asarray(probes, dtype=float)
        for i in range(last):
            dy = np.abs(fields.ys[i](probes) - ref_u(pts[i], probes))
            dz = np.abs(fields.zs[i](probes) - ref_z(pts[i], probes))
            bracket = dy**2 + (deltas[i] / four_d) * dz**2
            rows.append((i, float(dy.max()), float(dz.max()), float(bracket.max())))
    else:
        tree = fields.tree
        for i in range(last):
            xs = tree.states[i]
            w = tree.weights[i]
            dy = np.abs(fields.y_levels[i] - ref_u(pts[i], xs))
            dz = np.abs(fields.z_levels[i] - ref_z(pts[i], xs))
            bracket = float(w @ (dy**2 + (deltas[i] / four_d) * dz**2))
            rows.append((i, float(np.sqrt(w @ dy**2)), float(np.sqrt(w @ dz**2)), bracket))
    return ErrorMetricReport(
        per_index=rows,
        metric_t2=max(r[3] for r in rows),
        err_y=max(r[1] for r in rows),
        err_z=max(r[2] for r in rows),
    )


# ---------------------------------------------------------------------------
# local-order probes for the driver quadrature and the Z weight


def _fbar(p):
    if p.reference_u is None or p.reference_z is None:
        raise InvalidArgumentError("local-order probes need a reference solution")

    def fbar(s, x):
        return p.driver(s, x, p.reference_u(s, x), p.reference_z(s, x))

    return fbar


def _expected_fbar(p, fbar, t, x, s, quad_order):
    if s <= t:
        return float(fbar(t, np.asarray(x)))
    dw, w = xp.gauss_hermite_increments(s - t, quad_order)
    return float(w @ np.asarray(fbar(s, p.transition(float(x), s - t, dw)), dtype=float))


def cn_quadrature_defect(p, t, x, delta, quad_order=60, time_order=24):
    """|E[int fbar ds] - (delta/2)(fbar(t_i) + E[fbar(t_{i+1})])| on one interval.

    Expectations by high-order Gauss-Hermite quadrature, the time integral by
    Gauss-Legendre. Third-order smallness of this defect is what makes the
    trapezoidal driver rule second-order globally.
    """
    fbar = _fbar(p)
    gl_x, gl_w = leggauss(time_order)
    s_nodes = t + 0.5 * delta * (gl_x + 1.0)
    integral = 0.5 * delta * sum(
        wgt * _expected_fbar(p, fbar, t, x, s, quad_order) for s, wgt in zip(s_nodes, gl_w)
    )
    trapezoid = 0.5 * delta * (
        _expected_fbar(p, fbar, t, x, t, quad_order)
        + _expected_fbar(p, fbar, t, x, t + delta, quad_order)
    )
    return abs(integral - trapezoid)


def z_weight_defect(p, t, x, delta, quad_order=60):
    """|Z(t,x) - E[(Y_{t+delta} + (delta/2) f(t+delta,...)) Z_i]| with exact (Y, Z).

    Second-order smallness in delta is the weight functional's defining
    property; evaluated through the quadrature backend's collapsed weight.
    """
    fbar = _fbar(p)
    s = t + delta

    def psi(x_next):
        return p.reference_u(s, x_next) + 0.5 * delta * fbar(s, x_next)

    step = xp.grid_quadrature_step(p, psi, float(x), delta, quad_order)
    return abs(float(p.reference_z(t, np.asarray(x))) - step.second_order_weighted)
