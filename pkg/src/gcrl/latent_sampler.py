"""Sampling grouped causally-structured latent variables.

Two generative regimes are covered directly:

  laplace_tanh   conditional density proportional to
                 exp(-sum_b lambda_b * |s - alpha*tanh(beta*s_b)|),
                 drawn exactly by inverting the piecewise-exponential CDF
                 segment by segment (no rejection, no discretization)
  gauss_relu     Gaussian conditional whose mean is pulled down by the
                 positive part of each parent and whose variance is
                 stabilized by the parent count; used with Gibbs sweeps on
                 cyclic graphs and sampled ancestrally on DAGs

plus a generic exponential-family conditional evaluated on a grid with
inverse-CDF sampling, for custom sufficient-statistic/basis pairs.

Parentless variables follow Laplace(0,1) under laplace_tanh, N(0,1) under
gauss_relu, and the base measure under expfam. Within-group parents enter
the conditionals exactly like cross-group parents.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .graphs import GroupedGraph, topological_order

GRID_WINDOW = (-10.0, 10.0)
GRID_POINTS = 8192
NORMALIZER_FLOOR = 1e-300


class SamplerError(ValueError):
    """Bad sampler configuration or non-integrable conditional."""


def _std_normal_logpdf(x: np.ndarray) -> np.ndarray:
    return -0.5 * x * x


@dataclass(frozen=True)
class CausalFunction:
    """Pairwise causal-effect family used by the latent conditionals.

    kind 'laplace_tanh' uses alpha/beta; kind 'expfam' uses eta/T (lists of
    scalar-vectorized callables) plus log_base; 'gauss_relu' and 'grn_hill'
    need no extra fields ('grn_hill' is handled by the regulatory-network
    integrator, not by these samplers).
    """

    kind: str
    alpha: float = 3.0
    beta: float = 0.8
    eta: tuple[Callable, ...] = ()
    T: tuple[Callable, ...] = ()
    log_base: Callable = _std_normal_logpdf

    def __post_init__(self) -> None:
        if self.kind not in ("laplace_tanh", "gauss_relu", "expfam", "grn_hill"):
            raise SamplerError(f"unknown causal function kind {self.kind!r}")
        if self.kind == "expfam" and (len(self.eta) == 0 or len(self.eta) != len(self.T)):
            raise SamplerError("expfam needs matching non-empty eta and T lists")


@dataclass
class LatentSamples:
    values: np.ndarray
    dims: list[int]
    confounder_mask: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.confounder_mask = np.asarray(self.confounder_mask, dtype=bool)
        if self.values.ndim != 2 or self.values.shape[1] != sum(self.dims):
            raise SamplerError("sample matrix does not match group dims")
        if self.confounder_mask.shape != (self.values.shape[1],):
            raise SamplerError("confounder mask does not match columns")


def _exprel(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z, stable near zero."""
    out = np.ones_like(z)
    nz = z != 0.0
    out[nz] = np.expm1(z[nz]) / z[nz]
    return out


def sample_piecewise_laplace(
    mu: np.ndarray, lam: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Exact draws from densities proportional to exp(-sum_p lam_p |s - mu_p|).

    mu and lam have shape (n, P): one row per draw, one column per parent.
    The log-density is piecewise linear with knots at the sorted mu values;
    each segment carries an exponential density whose mass and inverse CDF
    are closed-form, so sampling picks a segment by its mass and inverts
    within it.
    """
    mu = np.asarray(mu, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if mu.shape != lam.shape or mu.ndim != 2:
        raise SamplerError("mu and lam must share a (n, parents) shape")
    if np.any(lam <= 0.0):
        raise SamplerError("piecewise Laplace weights must be positive")
    n, P = mu.shape
    order = np.argsort(mu, axis=1)
    m = np.take_along_axis(mu, order, axis=1)
    l = np.take_along_axis(lam, order, axis=1)
    total_rate = l.sum(axis=1)

    # log density (up to a constant) at each knot
    dist = np.abs(m[:, :, None] - m[:, None, :])
    G = -np.einsum("nij,nj->ni", dist, l)

    # segment masses: left tail, P-1 interior pieces, right tail
    eG = np.exp(G)
    masses = np.empty((n, P + 1))
    masses[:, 0] = eG[:, 0] / total_rate
    masses[:, P] = eG[:, -1] / total_rate
    if P > 1:
        # log-density slope between knots j and j+1: rates above minus below
        slopes = total_rate[:, None] - 2.0 * np.cumsum(l, axis=1)[:, :-1]
        widths = np.diff(m, axis=1)
        masses[:, 1:P] = eG[:, :-1] * widths * _exprel(slopes * widths)

    cum = np.cumsum(masses, axis=1)
    u = rng.random(n) * cum[:, -1]
    seg = (u[:, None] >= cum).sum(axis=1)
    residual = u - np.where(seg > 0, np.take_along_axis(cum, np.maximum(seg - 1, 0)[:, None], axis=1)[:, 0], 0.0)
    residual = np.maximum(residual, 1e-300)

    out = np.empty(n)
    left = seg == 0
    if left.any():
        out[left] = m[left, 0] + (np.log(residual[left] * total_rate[left]) - G[left, 0]) / total_rate[left]
    right = seg == P
    if right.any():
        arg = -residual[right] * total_rate[right] * np.exp(-G[right, -1])
        out[right] = m[right, -1] - np.log1p(np.maximum(arg, -1.0 + 1e-16)) / total_rate[right]
    interior = ~(left | right)
    if interior.any():
        j = seg[interior] - 1
        rows = np.flatnonzero(interior)
        kj = slopes[rows, j]
        Gj = G[rows, j]
        r = residual[interior]
        lin = r * np.exp(-Gj)
        with np.errstate(invalid="ignore"):
            curved = np.log1p(r * kj * np.exp(-Gj)) / kj
        out[interior] = m[rows, j] + np.where(kj == 0.0, lin, curved)
    return out


def _gauss_relu_conditional(
    parent_vals: np.ndarray, lam: np.ndarray
) -> tuple[np.ndarray, float]:
    """Mean and sigma of the parent-count-stabilized Gaussian conditional.

    Effective weights are lam / n_parents; sigma = 1/sqrt(sum of effective
    weights); the mean is minus the effective-weight average of relu(parent).
    """
    w = lam / lam.size
    denom = w.sum()
    mean = -(np.maximum(parent_vals, 0.0) @ w) / denom
    return mean, float(1.0 / np.sqrt(denom))


def _expfam_grid_logpdf(
    phi: CausalFunction, theta: np.ndarray, x: np.ndarray
) -> np.ndarray:
    """theta: (n, K) natural parameters; x: (G,) grid. Returns (n, G)."""
    Tvals = np.stack([np.asarray(Tk(x), dtype=np.float64) for Tk in phi.T])
    return phi.log_base(x)[None, :] + theta @ Tvals


def _grid_inverse_cdf(
    logf: np.ndarray, x: np.ndarray, u: np.ndarray
) -> np.ndarray:
    """Row-wise inverse CDF on a regular grid; errors on vanishing mass."""
    shift = logf.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(shift)):
        raise SamplerError("conditional density vanishes on the whole window")
    w = np.exp(logf - shift)
    dx = x[1] - x[0]
    log_norm = shift[:, 0] + np.log(w.sum(axis=1) * dx)
    if np.any(log_norm < np.log(NORMALIZER_FLOOR)):
        raise SamplerError("conditional density is not integrable on the window")
    cdf = np.cumsum(w, axis=1)
    total = cdf[:, -1]
    target = u * total
    idx = (cdf < target[:, None]).sum(axis=1)
    idx = np.minimum(idx, x.size - 1)
    prev = np.where(idx > 0, np.take_along_axis(cdf, np.maximum(idx - 1, 0)[:, None], axis=1)[:, 0], 0.0)
    cell = np.take_along_axis(w, idx[:, None], axis=1)[:, 0]
    frac = np.clip((target - prev) / np.maximum(cell, 1e-300), 0.0, 1.0)
    return np.clip(x[idx] - dx + frac * dx, x[0], x[-1])


def _grid_inverse_cdf_shared(
    logf: np.ndarray, x: np.ndarray, u: np.ndarray
) -> np.ndarray:
    """Inverse CDF for many draws against one fixed grid density."""
    shift = logf.max()
    if not np.isfinite(shift):
        raise SamplerError("conditional density vanishes on the whole window")
    w = np.exp(logf - shift)
    dx = x[1] - x[0]
    if shift + np.log(w.sum() * dx) < np.log(NORMALIZER_FLOOR):
        raise SamplerError("conditional density is not integrable on the window")
    cdf = np.cumsum(w)
    target = u * cdf[-1]
    idx = np.minimum(np.searchsorted(cdf, target), x.size - 1)
    prev = np.where(idx > 0, cdf[np.maximum(idx - 1, 0)], 0.0)
    frac = np.clip((target - prev) / np.maximum(w[idx], 1e-300), 0.0, 1.0)
    return np.clip(x[idx] - dx + frac * dx, x[0], x[-1])


@dataclass
class ExpfamConditional:
    """One conditional density p(s | parents) in natural-parameter form.

    The log-density (up to the normalizer) is
    log_base(s) + sum_k theta_k T_k(s) with theta_k = sum_b lam_b eta_k(s_b).
    """

    phi: CausalFunction
    theta: np.ndarray
    window: tuple[float, float] = GRID_WINDOW
    grid_points: int = GRID_POINTS

    def logpdf_unnormalized(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = self.phi.log_base(x).copy()
        for k, Tk in enumerate(self.phi.T):
            out += self.theta[k] * np.asarray(Tk(x), dtype=np.float64)
        return out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        x = np.linspace(self.window[0], self.window[1], self.grid_points)
        logf = _expfam_grid_logpdf(self.phi, self.theta[None, :], x)[0]
        return _grid_inverse_cdf_shared(logf, x, rng.random(n))


def expfam_conditional(
    phi: CausalFunction,
    parents: Sequence[float],
    lams: Sequence[float],
    window: tuple[float, float] = GRID_WINDOW,
    grid_points: int = GRID_POINTS,
) -> ExpfamConditional:
    """Build the conditional for one parent configuration."""
    if phi.kind != "expfam":
        raise SamplerError("expfam_conditional needs an expfam causal function")
    parents = np.asarray(parents, dtype=np.float64)
    lams = np.asarray(lams, dtype=np.float64)
    if parents.shape != lams.shape:
        raise SamplerError("parents and lams must align")
    theta = np.array(
        [float(np.sum(lams * np.asarray(ek(parents), dtype=np.float64))) for ek in phi.eta]
    )
    return ExpfamConditional(phi, theta, window, grid_points)


def _parent_lists(g: GroupedGraph) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for j in range(g.n_vars):
        parents = np.flatnonzero(g.adjacency[:, j])
        out.append((parents, g.adjacency[parents, j]))
    return out


def ancestral_sample(
    g: GroupedGraph, phi: CausalFunction, n: int, seed: int
) -> LatentSamples:
    """Sample n rows from a DAG in topological order.

    laplace_tanh and gauss_relu conditionals are drawn exactly; expfam goes
    through the grid inverse-CDF (chunked over samples).
    """
    order = topological_order(g)
    rng = np.random.default_rng(seed)
    parents = _parent_lists(g)
    S = np.zeros((n, g.n_vars))
    for j in order:
        par, lam = parents[j]
        if phi.kind == "laplace_tanh":
            if par.size == 0:
                S[:, j] = rng.laplace(0.0, 1.0, size=n)
            else:
                mu = phi.alpha * np.tanh(phi.beta * S[:, par])
                S[:, j] = sample_piecewise_laplace(mu, np.broadcast_to(lam, mu.shape), rng)
        elif phi.kind == "gauss_relu":
            if par.size == 0:
                S[:, j] = rng.normal(0.0, 1.0, size=n)
            else:
                mean, sigma = _gauss_relu_conditional(S[:, par], lam)
                S[:, j] = rng.normal(0.0, 1.0, size=n) * sigma + mean
        elif phi.kind == "expfam":
            S[:, j] = _ancestral_expfam_column(phi, S[:, par], lam, n, rng)
        else:
            raise SamplerError(f"ancestral sampling does not support {phi.kind!r}")
    return LatentSamples(S, list(g.dims), g.confounder_mask.copy())


def _ancestral_expfam_column(
    phi: CausalFunction,
    parent_vals: np.ndarray,
    lam: np.ndarray,
    n: int,
    rng: np.random.Generator,
    chunk: int = 1024,
) -> np.ndarray:
    x = np.linspace(GRID_WINDOW[0], GRID_WINDOW[1], GRID_POINTS)
    out = np.empty(n)
    u = rng.random(n)
    if parent_vals.shape[1] == 0:
        return _grid_inverse_cdf_shared(phi.log_base(x), x, u)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        block = parent_vals[lo:hi]
        theta = np.stack(
            [np.asarray(ek(block), dtype=np.float64) @ lam for ek in phi.eta], axis=1
        )
        logf = _expfam_grid_logpdf(phi, theta, x)
        out[lo:hi] = _grid_inverse_cdf(logf, x, u[lo:hi])
    return out


def gibbs_sample(
    g: GroupedGraph, phi: CausalFunction, n: int, seed: int, sweeps: int = 50
) -> LatentSamples:
    """n independent chains, `sweeps` full sequential scans in variable order.

    Each variable is redrawn from its parent conditional given the chain's
    current state, which handles directed cycles; on a DAG the stationary
    draw matches ancestral sampling. Chains start from standard normals and
    the final state is returned.
    """
    if phi.kind != "gauss_relu":
        raise SamplerError("gibbs sampling is defined for the gauss_relu family")
    if sweeps < 1:
        raise SamplerError("need at least one sweep")
    rng = np.random.default_rng(seed)
    parents = _parent_lists(g)
    S = rng.normal(0.0, 1.0, size=(n, g.n_vars))
    for _ in range(sweeps):
        for j in range(g.n_vars):
            par, lam = parents[j]
            noise = rng.normal(0.0, 1.0, size=n)
            if par.size == 0:
                S[:, j] = noise
            else:
                mean, sigma = _gauss_relu_conditional(S[:, par], lam)
                S[:, j] = noise * sigma + mean
    return LatentSamples(S, list(g.dims), g.confounder_mask.copy())


def mask_confounders(
    samples: LatentSamples, g: GroupedGraph | None = None
) -> LatentSamples:
    """Drop confounder columns and recount the per-group dims. Idempotent:
    masked output carries an all-False mask, so masking again is a no-op."""
    mask = samples.confounder_mask
    if g is not None:
        if g.n_vars == samples.values.shape[1]:
            mask = g.confounder_mask
        elif int((~g.confounder_mask).sum()) == samples.values.shape[1]:
            mask = samples.confounder_mask  # already restricted to observables
        else:
            raise SamplerError("graph and samples disagree on variable count")
    keep = ~mask
    starts = np.cumsum([0] + list(samples.dims))
    dims = [int(keep[starts[m]:starts[m + 1]].sum()) for m in range(len(samples.dims))]
    return LatentSamples(samples.values[:, keep], dims, np.zeros(int(keep.sum()), dtype=bool))
