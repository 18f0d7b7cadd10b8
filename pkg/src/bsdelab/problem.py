"""Decoupled forward-backward SDE instances.

Forward dynamics are given in Stratonovich form through the vector fields
V_0..V_d; the backward pair (Y, Z) is driven by a terminal condition and a
driver f(t, x, y, z). Built-in problems ship exact one-step transitions (no
forward discretization error) and closed-form references where available.
"""

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtr

from .errors import InvalidArgumentError

GRID_CLUSTER_STRENGTH = 8.0  # sinh concentration for log-space grids


@dataclass(frozen=True)
class FbsdeProblem:
    """A decoupled FBSDE with exact one-step forward transitions.

    All callables are numpy-vectorized in the state. `transition(x, delta, dw)`
    must return a distributionally exact endpoint and reduce to the identity at
    delta = 0; `depends_on_increment_only` asserts the endpoint is a function
    of the Brownian increment alone (grid quadrature relies on it).
    """

    name: str
    d: int
    q: int
    vector_fields: tuple  # (V_0, ..., V_d)
    vector_field_jacobians: tuple | None
    driver: Callable  # f(t, x, y, z)
    lipschitz: float  # K with |f(..y,z) - f(..y',z')| <= K(|dy| + |dz|)
    terminal: Callable
    terminal_gradient: Callable | None
    smoothness: str  # "C1_lipschitz" or "C2_smooth"
    x0: float
    horizon: float
    transition: Callable
    depends_on_increment_only: bool
    reference_u: Callable | None = None
    reference_z: Callable | None = None
    linear_driver_rate: float | None = None  # c where f = c*y; None if not of that form
    grid_geometry: str = "linear"  # "linear" or "log"
    grid_scale: float = 1.0  # state spread per unit padding (log-space for "log")
    grid_cluster: float | None = None  # extra node density around this state
    params: dict = field(default_factory=dict)

    def diffusion(self, x):
        """V(x) as used in Z = grad(u) V; scalar field for d = q = 1."""
        return self.vector_fields[1](x)


def _jacobian(p: FbsdeProblem, j: int, x):
    if p.vector_field_jacobians is not None:
        return p.vector_field_jacobians[j](x)
    h = float(np.finfo(float).eps) ** (1.0 / 3.0) * (1.0 + np.abs(x))
    vf = p.vector_fields[j]
    return (vf(x + h) - vf(x - h)) / (2.0 * h)


def ito_drift(p: FbsdeProblem, x, sign: float = 1.0):
    """Drift for the PDE oracle: V_0 + (sign/2) * sum_j dV_j V_j.

    The default sign +1 is the one the self-consistency calibration selects
    (it is also the standard Stratonovich-to-Ito conversion for the forward
    equation); `sign=-1` reproduces the rejected candidate.
    """
    x = np.asarray(x, dtype=float)
    out = np.asarray(p.vector_fields[0](x), dtype=float) + np.zeros_like(x)
    for j in range(1, p.d + 1):
        out = out + 0.5 * sign * np.asarray(_jacobian(p, j, x)) * np.asarray(p.vector_fields[j](x))
    return out


def lognormal_call_value(x, tau, sigma, rate, strike):
    """e^{-r tau} E[(x e^{sigma W_tau} - K)^+] and its x-derivative times sigma*x.

    Stratonovich convention: the exact transition is x e^{sigma dW}, so the
    forward factor is e^{sigma^2 tau / 2}. Returns (value, z = u_x * sigma * x).
    """
    x = np.asarray(x, dtype=float)
    tau = np.asarray(tau, dtype=float)
    payoff = np.maximum(x - strike, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        srt = sigma * np.sqrt(np.maximum(tau, 0.0))
        d2 = np.log(x / strike) / srt
        d1 = d2 + srt
        disc = np.exp(-rate * tau)
        value = disc * (x * np.exp(0.5 * sigma**2 * tau) * ndtr(d1) - strike * ndtr(d2))
        zval = sigma * x * disc * np.exp(0.5 * sigma**2 * tau) * ndtr(d1)
    tiny = tau <= 1e-14
    if np.any(tiny):
        value = np.where(tiny, payoff, value)
        zval = np.where(tiny, sigma * x * (x > strike), zval)
    return value, zval


def _bm_linear(x0=0.0, horizon=1.0):
    return FbsdeProblem(
        name="bm_linear",
        d=1,
        q=1,
        vector_fields=(lambda x: np.zeros_like(np.asarray(x, dtype=float)), lambda x: np.ones_like(np.asarray(x, dtype=float))),
        vector_field_jacobians=(lambda x: np.zeros_like(np.asarray(x, dtype=float)),) * 2,
        driver=lambda t, x, y, z: np.zeros_like(np.asarray(y, dtype=float)),
        lipschitz=0.0,
        terminal=lambda x: np.asarray(x, dtype=float),
        terminal_gradient=lambda x: np.ones_like(np.asarray(x, dtype=float)),
        smoothness="C2_smooth",
        x0=float(x0),
        horizon=float(horizon),
        transition=lambda x, delta, dw: np.asarray(x, dtype=float) + dw,
        depends_on_increment_only=True,
        reference_u=lambda t, x: np.asarray(x, dtype=float),
        reference_z=lambda t, x: np.ones_like(np.asarray(x, dtype=float)),
        linear_driver_rate=0.0,
        grid_geometry="linear",
        grid_scale=math.sqrt(float(horizon)),
        params={"x0": float(x0), "horizon": float(horizon)},
    )


def _manufactured_sin(a=1.0, b=1.0, x0=0.0, horizon=1.0):
    a, b, T = float(a), float(b), float(horizon)

    # forcing chosen so u(t,x) = e^(t-T) sin x solves the semilinear PDE exactly
    def forcing(t, x):
        return -np.exp(t - T) * ((0.5 + a) * np.sin(x) + b * np.cos(x))

    return FbsdeProblem(
        name="manufactured_sin",
        d=1,
        q=1,
        vector_fields=(lambda x: np.zeros_like(np.asarray(x, dtype=float)), lambda x: np.ones_like(np.asarray(x, dtype=float))),
        vector_field_jacobians=(lambda x: np.zeros_like(np.asarray(x, dtype=float)),) * 2,
        driver=lambda t, x, y, z: a * y + b * z + forcing(t, x),
        lipschitz=max(abs(a), abs(b)),
        terminal=np.sin,
        terminal_gradient=np.cos,
        smoothness="C2_smooth",
        x0=float(x0),
        horizon=T,
        transition=lambda x, delta, dw: np.asarray(x, dtype=float) + dw,
        depends_on_increment_only=True,
        reference_u=lambda t, x: np.exp(t - T) * np.sin(x),
        reference_z=lambda t, x: np.exp(t - T) * np.cos(x),
        linear_driver_rate=None,
        grid_geometry="linear",
        grid_scale=math.sqrt(T),
        params={"a": a, "b": b, "x0": float(x0), "horizon": T},
    )


def _call_lipschitz(sigma=0.2, rate=0.05, strike=1.0, x0=1.0, horizon=1.0):
    sigma, rate, strike, T = float(sigma), float(rate), float(strike), float(horizon)
    if sigma <= 0.0 or strike <= 0.0 or x0 <= 0.0:
        raise InvalidArgumentError("call_lipschitz needs sigma, strike, x0 > 0")

    return FbsdeProblem(
        name="call_lipschitz",
        d=1,
        q=1,
        vector_fields=(lambda x: np.zeros_like(np.asarray(x, dtype=float)), lambda x: sigma * np.asarray(x, dtype=float)),
        vector_field_jacobians=(
            lambda x: np.zeros_like(np.asarray(x, dtype=float)),
            lambda x: sigma * np.ones_like(np.asarray(x, dtype=float)),
        ),
        driver=lambda t, x, y, z: -rate * np.asarray(y, dtype=float),
        lipschitz=rate,
        terminal=lambda x: np.maximum(np.asarray(x, dtype=float) - strike, 0.0),
        terminal_gradient=None,
        smoothness="C1_lipschitz",
        x0=float(x0),
        horizon=T,
        # Stratonovich dX = sigma X o dW has the exact flow x e^(sigma dW)
        transition=lambda x, delta, dw: np.asarray(x, dtype=float) * np.exp(sigma * np.asarray(dw, dtype=float)),
        depends_on_increment_only=True,
        reference_u=lambda t, x: lognormal_call_value(x, T - t, sigma, rate, strike)[0],
        reference_z=lambda t, x: lognormal_call_value(x, T - t, sigma, rate, strike)[1],
        linear_driver_rate=-rate,
        grid_geometry="log",
        grid_scale=sigma * math.sqrt(T),
        grid_cluster=strike,
        params={"sigma": sigma, "rate": rate, "strike": strike, "x0": float(x0), "horizon": T},
    )


_BUILTINS = {
    "bm_linear": _bm_linear,
    "manufactured_sin": _manufactured_sin,
    "call_lipschitz": _call_lipschitz,
}


def builtin(name: str, **params) -> FbsdeProblem:
    """Construct a built-in problem: bm_linear, manufactured_sin or call_lipschitz."""
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise InvalidArgumentError(
            f"unknown problem {name!r}; choose from {sorted(_BUILTINS)}"
        ) from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise InvalidArgumentError(f"bad parameters for {name}: {exc}") from None


def state_grid(p: FbsdeProblem, num_nodes: int = 401, padding: float = 6.0) -> np.ndarray:
    """Spatial grid covering `padding` diffusion scales around x0.

    Linear-geometry problems get a uniform grid. Log-geometry problems get
    geometrically spaced nodes, sinh-clustered around `grid_cluster` (the
    strike) so near-terminal value functions with localized curvature stay
    resolved.
    """
    if num_nodes < 4:
        raise InvalidArgumentError(f"need num_nodes >= 4, got {num_nodes}")
    half = padding * p.grid_scale
    if p.grid_geometry == "linear":
        return p.x0 + np.linspace(-half, half, num_nodes)
    xi0 = math.log(p.x0)
    lo, hi = xi0 - half, xi0 + half
    xic = math.log(p.grid_cluster) if p.grid_cluster is not None else xi0
    xic = min(max(xic, lo + 1e-9), hi - 1e-9)
    a = 2.0 * half / math.sinh(GRID_CLUSTER_STRENGTH)
    s = np.linspace(math.asinh((lo - xic) / a), math.asinh((hi - xic) / a), num_nodes)
    return np.exp(xic + a * np.sinh(s))


def default_probes(p: FbsdeProblem, count: int = 21, padding: float = 6.0) -> np.ndarray:
    """Probe states spanning the central 50% of the spatial grid."""
    half = 0.5 * padding * p.grid_scale
    if p.grid_geometry == "linear":
        return p.x0 + np.linspace(-half, half, count)
    xi0 = math.log(p.x0)
    return np.exp(np.linspace(xi0 - half, xi0 + half, count))
