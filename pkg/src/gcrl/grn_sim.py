"""Stochastic gene-regulatory-network simulator (chemical-Langevin style).

Expression levels follow the Euler-Maruyama discretization of

    dx_i = (P_i(x) - gamma * x_i) dt
           + q * (sqrt(P_i(x)) + sqrt(gamma * x_i)) dW_i

where the production rate P_i sums a Hill term per parent edge: activating
edges contribute K * x_p^h / (x_p^h + half_sat^h), repressing edges
K * (1 - x_p^h / (x_p^h + half_sat^h)), and parentless genes (master
regulators) have a constant basal rate instead. Each edge's half-saturation
point equals its parent's noise-free steady-state mean, computed exactly in
topological order (a master regulator settles at basal/decay; any other
gene's converged production is K/2 per parent edge, since every parent sits
exactly at its own half-saturation). States are clipped at zero after every
step so the degradation noise term stays real.

Cells are integrated independently, initialized at the noise-free steady
state, and the final state of each cell is returned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import GroupedGraph, topological_order
from .latent_sampler import LatentSamples

HALF_SAT_FLOOR = 1e-6


class GrnError(ValueError):
    """Invalid simulator parameters or graph."""


@dataclass(frozen=True)
class GrnParams:
    """Simulator knobs.

    The step count must cover at least five decay time constants
    (steps >= 5 / (decay_rate * dt)) so every cell relaxes to stationarity.
    activating_fraction records the per-gene share of activating parents
    used when the graph's signs were assigned (the odd parent activates).
    """

    hill_coefficient: float = 6.0
    interaction_magnitude: float = 0.25
    basal_rate_range: tuple[float, float] = (0.25, 0.75)
    decay_rate: float = 0.8
    noise_amplitude: float = 1.0
    dt: float = 0.01
    steps: int = 1500
    activating_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.hill_coefficient <= 0 or self.decay_rate <= 0 or self.dt <= 0:
            raise GrnError("hill coefficient, decay rate and dt must be positive")
        if self.noise_amplitude < 0 or self.interaction_magnitude <= 0:
            raise GrnError("bad noise amplitude or interaction magnitude")
        lo, hi = self.basal_rate_range
        if not (0 <= lo <= hi):
            raise GrnError("basal rate range must be ordered and non-negative")
        if self.steps < 5.0 / (self.decay_rate * self.dt):
            raise GrnError(
                "steps must cover at least five decay time constants "
                f"(needs >= {5.0 / (self.decay_rate * self.dt):.0f})"
            )


def draw_basal_rates(g: GroupedGraph, p: GrnParams, seed: int) -> np.ndarray:
    """Basal production per gene: uniform in basal_rate_range for master
    regulators (parentless genes), zero elsewhere. Deterministic per seed."""
    rng = np.random.default_rng([int(seed), 0])
    n_parents = (g.adjacency != 0).sum(axis=0)
    basal = np.zeros(g.n_vars)
    mrs = np.flatnonzero(n_parents == 0)
    lo, hi = p.basal_rate_range
    basal[mrs] = rng.uniform(lo, hi, size=mrs.size)
    return basal


def noise_free_steady_state(
    g: GroupedGraph, p: GrnParams, basal: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic fixed point and per-edge half-saturation matrix.

    Processed in topological order: once a parent has converged to its own
    steady state, its Hill term sits exactly at one half, so each non-root
    gene's production is sum_parents |K|/2 (plus basal, zero for non-roots).
    """
    order = topological_order(g)
    xbar = np.zeros(g.n_vars)
    half = np.zeros_like(g.adjacency)
    for j in order:
        parents = np.flatnonzero(g.adjacency[:, j])
        prod = basal[j] + 0.5 * np.abs(g.adjacency[parents, j]).sum()
        xbar[j] = prod / p.decay_rate
        half[parents, j] = np.maximum(xbar[parents], HALF_SAT_FLOOR)
    return xbar, half


@dataclass
class TailStats:
    """Stationarity diagnostics from the first integration chunk."""

    step_means: np.ndarray  # (tail_steps, D) cell-averaged state per step
    final_mean: np.ndarray  # (D,)
    final_se: np.ndarray  # (D,)


def simulate_grn(
    g: GroupedGraph,
    p: GrnParams,
    n: int,
    seed: int,
    tail_stats: bool = False,
    chunk: int = 8192,
):
    """Integrate n cells to stationarity and return their final states.

    Returns LatentSamples, or (LatentSamples, TailStats) when tail_stats is
    set; the tail statistics cover the last tenth of the steps of the first
    chunk of cells.
    """
    order = topological_order(g)  # also rejects cycles
    del order
    if n < 1:
        raise GrnError("need at least one cell")
    basal = draw_basal_rates(g, p, seed)
    xbar, half = noise_free_steady_state(g, p, basal)
    rng = np.random.default_rng([int(seed), 1])

    src, dst = np.nonzero(g.adjacency)
    sort = np.argsort(dst, kind="stable")
    src, dst = src[sort], dst[sort]
    K = np.abs(g.adjacency[src, dst])
    activating = g.adjacency[src, dst] > 0
    hpow = half[src, dst] ** p.hill_coefficient
    uniq_dst, starts = np.unique(dst, return_index=True)

    gamma, q, dt, h = p.decay_rate, p.noise_amplitude, p.dt, p.hill_coefficient
    sq_dt = np.sqrt(dt)
    tail_from = p.steps - max(1, p.steps // 10)
    tail: TailStats | None = None

    out = np.empty((n, g.n_vars))
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        x = np.tile(xbar, (hi - lo, 1))
        step_means = [] if (tail_stats and lo == 0) else None
        for step in range(p.steps):
            if src.size:
                xh = np.power(x[:, src], h)
                frac = xh / (xh + hpow)
                contrib = np.where(activating, K * frac, K * (1.0 - frac))
                prod = np.tile(basal, (x.shape[0], 1))
                prod[:, uniq_dst] += np.add.reduceat(contrib, starts, axis=1)
            else:
                prod = np.tile(basal, (x.shape[0], 1))
            noise = rng.normal(size=x.shape)
            diffusion = q * (np.sqrt(prod) + np.sqrt(gamma * x)) * sq_dt
            x = x + (prod - gamma * x) * dt + diffusion * noise
            x = np.maximum(x, 0.0)
            if step_means is not None and step >= tail_from:
                step_means.append(x.mean(axis=0))
        out[lo:hi] = x
        if step_means is not None:
            tail = TailStats(
                step_means=np.asarray(step_means),
                final_mean=x.mean(axis=0),
                final_se=x.std(axis=0, ddof=1) / np.sqrt(x.shape[0]),
            )
    samples = LatentSamples(out, list(g.dims), g.confounder_mask.copy())
    return (samples, tail) if tail_stats else samples
