"""Contrastive estimator for grouped latents and their inter-group graph.

The estimator is a logistic regression that discriminates real joint samples
x = [x^1 .. x^M] from negatives whose group blocks are re-drawn independently
(each group's rows resampled from the full dataset). Its logit is

    r(x) = c + sum_m psi_m(z^m) + sum_{m != m'} sum_{a,b} psi_ab(z_a^m, z_b^{m'})

with z^m = h^m(x^m). The group feature extractors h^m undo the observation
nonlinearity; psi_m is a small scalar MLP per group; the pairwise terms carry
one scalar coupling weight per coordinate pair, and those learned weights are
the inter-group graph estimate. Three pairwise families cover the supported
data regimes:

  abs_mlp          w1 * |w2 * y + |w2| * u(x)| + w1m * |w2 * y - |w2| * u(x)|,
                   u a 1-8-1 tanh MLP shared by both direction blocks of a
                   group pair; the coupling weight is (w1 + w1m) * |w2|
  maxout_bilinear  w * y * max(a1 * (x - b1), a2 * (x - b2)), scalar pieces
                   (a1, a2, b1, b2) per directed group pair
  tanh_mixture     w * y * sum_k alpha_k tanh(beta_k x + c_k), one learnable
                   basis shared across all pairs

Coupling weights are per ordered coordinate pair in every family; the
nonlinear carriers are shared at the scopes above. Every family starts with
its coupling weights at zero and the group potentials' output layers zeroed,
so the initial logit is identically zero and the initial loss is exactly
ln 2; couplings still receive nonzero gradient at that point, which
bootstraps the rest of the model.

Edge direction comes out of the abs_mlp family's shape: training projects w1
and w1m onto nonpositives after every step, so a pair term is a downward tent
in its second argument, centered by a transform of the first. The reversed
block shares the same transform and cannot carve the same tent, so coupling
mass settles on the true orientation. Both mirror images of the tent are
offered per cell because the tent coefficients gate the gradients of
everything else in the cell: a cell stuck at coefficient zero whose only
useful tent is the mirrored one would otherwise never recover.

All gradients are hand-chained: network segments run through diffnet tapes,
the pairwise reductions use closed-form expressions. Derivative conventions
at the non-smooth points: d|t|/dt = sign(t) with sign(0) = 0, and maxout ties
route to the first piece.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import diffnet
from .diffnet import (
    LayerSpec,
    Network,
    NumericFailure,
    UsageError,
    _decode_block,
    _encode_block,
)
from .mixing import GroupedDataset

MODEL_FORMAT_VERSION = "gcarl-model/3"
PSI_KINDS = ("abs_mlp", "maxout_bilinear", "tanh_mixture")

# data regime -> pairwise family whose shape matches the latent interaction
PSI_FOR_REGIME = {
    "sim1": "abs_mlp",
    "sim2": "maxout_bilinear",
    "grn": "tanh_mixture",
}

LN2 = float(np.log(2.0))

# Tent coefficients start at this value and are projected onto
# (-inf, -COUPLING_FLOOR] after every step. A cell pinned at exactly zero
# would be absorbing: the gradients of its scale, its carrier MLP, and the
# feature coordinates it reads all pass through the tent coefficients, so a
# zeroed cell can never recover and the feature coordinate it should anchor
# drifts into noise. The floor keeps every cell's gradient path open at a
# magnitude far below any genuine coupling; thresholding removes the
# background it leaves in the extracted graph.
COUPLING_FLOOR = 1e-3


class TrainingDiverged(NumericFailure):
    """Loss stayed above the divergence ceiling for too many iterations."""


@dataclass(frozen=True)
class PsiSpec:
    kind: str
    hidden: int = 8  # abs_mlp inner MLP width
    n_terms: int = 5  # tanh_mixture expansion size
    # sharing scopes for the nonlinear carriers (coupling weights are always
    # per coordinate pair); only these combinations are implemented
    mlp_scope: str = "group_pair"  # abs_mlp: one MLP per unordered group pair
    piece_scope: str = "group_pair"  # maxout_bilinear: scalars per directed pair
    basis_scope: str = "global"  # tanh_mixture: one basis for the whole model

    def __post_init__(self) -> None:
        if self.kind not in PSI_KINDS:
            raise UsageError(f"unknown pairwise family {self.kind!r}")
        if self.hidden < 1 or self.n_terms < 1:
            raise UsageError("hidden and n_terms must be positive")
        scopes = (self.mlp_scope, self.piece_scope, self.basis_scope)
        if scopes != ("group_pair", "group_pair", "global"):
            raise UsageError(f"unsupported parameter scope {scopes!r}")


@dataclass(frozen=True)
class TrainConfig:
    n_iters: int = 50_000
    batch_size: int = 512
    lr: float = 0.05
    lr_drop_factor: float = 0.3  # applied once at floor(2/3 * n_iters)
    momentum: float = 0.9
    eval_every: int = 500
    divergence_ceiling: float = 10.0 * LN2
    divergence_patience: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_iters < 1 or self.batch_size < 1:
            raise UsageError("n_iters and batch_size must be positive")
        if self.lr <= 0 or not (0 <= self.momentum < 1):
            raise UsageError("bad optimizer settings")


@dataclass
class PairPotential:
    kind: str
    params: dict[str, np.ndarray]  # trainable arrays
    mlp: Network | None = None  # abs_mlp only
    basis: dict[str, np.ndarray] | None = None  # tanh_mixture only; one dict shared model-wide


@dataclass
class RegressionModel:
    dims: list[int]
    depth: int
    psi: PsiSpec
    h_nets: list[Network | None]
    group_pots: list[Network]
    pairs: dict[tuple[int, int], PairPotential]
    offset: np.ndarray  # shape (1,)
    seed: int
    psi_basis: dict[str, np.ndarray] | None = None  # tanh_mixture global basis

    @property
    def M(self) -> int:
        return len(self.dims)

    def group_slice(self, m: int) -> slice:
        start = sum(self.dims[:m])
        return slice(start, start + self.dims[m])


def _feature_net(d: int, depth: int, seed) -> Network | None:
    """Group feature extractor matching a depth-L observation model:
    identity at depth 0, a square affine map at depth 1, otherwise maxout
    layers (2 pieces, width 2d) capped by a linear readout back to d."""
    if depth == 0:
        return None
    if depth == 1:
        return diffnet.build_network([LayerSpec("affine", d, d)], seed)
    specs = [LayerSpec("maxout", d, 2 * d, pieces=2)]
    for _ in range(depth - 2):
        specs.append(LayerSpec("maxout", 2 * d, 2 * d, pieces=2))
    specs.append(LayerSpec("affine", 2 * d, d))
    return diffnet.build_network(specs, seed)


def _group_potential(d: int, seed) -> Network:
    net = diffnet.build_network(
        [
            LayerSpec("affine", d, 2 * d),
            LayerSpec("tanh", 2 * d, 2 * d),
            LayerSpec("affine", 2 * d, 1),
        ],
        seed,
    )
    net.params[-1]["W"][:] = 0.0
    net.params[-1]["b"][:] = 0.0
    return net


def _pair_mlp(psi: PsiSpec, seed) -> Network:
    mlp = diffnet.build_network(
        [
            LayerSpec("affine", 1, psi.hidden),
            LayerSpec("tanh", psi.hidden, psi.hidden),
            LayerSpec("affine", psi.hidden, 1),
        ],
        seed,
    )
    # orient the transform downward at the origin: positively dependent
    # source/target cells then push w1 negative from the first step, so the
    # nonpositivity projection (see train) cannot strand a block at zero
    slope = float(mlp.params[0]["W"][0] @ mlp.params[-1]["W"][:, 0])
    if slope > 0.0:
        mlp.params[-1]["W"] *= -1.0
    return mlp


def _pair_potential(
    psi: PsiSpec,
    d_src: int,
    d_dst: int,
    mlp: Network | None = None,
    basis: dict[str, np.ndarray] | None = None,
) -> PairPotential:
    shape = (d_src, d_dst)
    if psi.kind == "abs_mlp":
        return PairPotential(
            "abs_mlp",
            {
                "w1": np.full(shape, -COUPLING_FLOOR),
                "w1m": np.full(shape, -COUPLING_FLOOR),
                "w2": np.ones(shape),
            },
            mlp=mlp,
        )
    if psi.kind == "maxout_bilinear":
        return PairPotential(
            "maxout_bilinear",
            {
                "w": np.zeros(shape),
                "a1": np.array(1.0),
                "a2": np.array(-1.0),
                "b1": np.array(0.0),
                "b2": np.array(0.0),
            },
        )
    return PairPotential("tanh_mixture", {"w": np.zeros(shape)}, basis=basis)


def build_model(
    dims: list[int], depth: int, psi: PsiSpec | str, seed: int
) -> RegressionModel:
    """Fresh model with the zero-logit initialization described above."""
    if isinstance(psi, str):
        psi = PsiSpec(psi)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise UsageError("need at least two groups with positive dims")
    if depth < 0:
        raise UsageError("depth must be non-negative")
    h_nets = [_feature_net(d, depth, [int(seed), 0, m]) for m, d in enumerate(dims)]
    group_pots = [_group_potential(d, [int(seed), 1, m]) for m, d in enumerate(dims)]
    basis = None
    if psi.kind == "tanh_mixture":
        rng = np.random.default_rng([int(seed), 2])
        basis = {k: rng.uniform(-1.0, 1.0, size=psi.n_terms) for k in ("alpha", "beta", "c")}
    pairs: dict[tuple[int, int], PairPotential] = {}
    for i in range(len(dims)):
        for j in range(len(dims)):
            if i == j:
                continue
            mlp = None
            if psi.kind == "abs_mlp":
                # the mirror block reuses the lower-indexed pair's network
                mirror = pairs.get((j, i))
                mlp = mirror.mlp if mirror else _pair_mlp(psi, [int(seed), 2, i, j])
            pairs[(i, j)] = _pair_potential(psi, dims[i], dims[j], mlp=mlp, basis=basis)
    return RegressionModel(
        list(dims), depth, psi, h_nets, group_pots, pairs, np.zeros(1), int(seed),
        psi_basis=basis,
    )


def trainable_arrays(model: RegressionModel) -> dict[str, np.ndarray]:
    """Flat name -> array registry of every trainable parameter. The arrays
    are the live model arrays, so in-place updates train the model."""
    reg: dict[str, np.ndarray] = {"offset": model.offset}
    for m, net in enumerate(model.h_nets):
        if net is None:
            continue
        for li, p in enumerate(net.params):
            for key, arr in p.items():
                reg[f"h.{m}.{li}.{key}"] = arr
    for m, net in enumerate(model.group_pots):
        for li, p in enumerate(net.params):
            for key, arr in p.items():
                reg[f"gp.{m}.{li}.{key}"] = arr
    for (i, j), pot in model.pairs.items():
        for key, arr in pot.params.items():
            reg[f"pair.{i}.{j}.{key}"] = arr
        # the shared network registers once, under its lower-indexed pair
        if pot.mlp is not None and i < j:
            for li, p in enumerate(pot.mlp.params):
                for key, arr in p.items():
                    reg[f"pair.{i}.{j}.mlp.{li}.{key}"] = arr
    if model.psi_basis is not None:
        for key, arr in model.psi_basis.items():
            reg[f"psi.{key}"] = arr
    return reg


def build_shuffled_batch(
    rng: np.random.Generator, X: np.ndarray, dims: list[int], batch: int
) -> tuple[np.ndarray, np.ndarray]:
    """Positive rows drawn with replacement; negatives re-draw every group's
    rows independently over the full dataset, which factorizes the groups
    while leaving each group's marginal untouched."""
    n = X.shape[0]
    pos = X[rng.integers(0, n, size=batch)]
    blocks = []
    start = 0
    for d in dims:
        idx = rng.integers(0, n, size=batch)
        blocks.append(X[idx, start : start + d])
        start += d
    return pos, np.concatenate(blocks, axis=1)


# ---------------------------------------------------------------- pairwise


def _pair_forward(pot: PairPotential, x: np.ndarray, y: np.ndarray, u=None):
    """Returns (contribution (B,), cache).

    For abs_mlp the caller may pass precomputed transform values `u`; the
    cache then carries no tape and the backward pass reports the gradient
    with respect to `u` instead of unrolling the network itself.
    """
    if pot.kind == "abs_mlp":
        if u is None:
            B, d_src = x.shape
            u_flat, tape = diffnet.forward(pot.mlp, x.reshape(-1, 1))
            u = u_flat.reshape(B, d_src)
        else:
            tape = None
        p = pot.params
        wy = p["w2"][None] * y[:, None, :]
        wu = np.abs(p["w2"])[None] * u[:, :, None]
        v, vm = wy + wu, wy - wu
        contrib = np.einsum("ab,nab->n", p["w1"], np.abs(v))
        contrib += np.einsum("ab,nab->n", p["w1m"], np.abs(vm))
        return contrib, (x, y, u, v, vm, tape)
    if pot.kind == "maxout_bilinear":
        p = pot.params
        p1 = p["a1"] * (x - p["b1"])
        p2 = p["a2"] * (x - p["b2"])
        take1 = p1 >= p2  # tie routes to the first piece
        q = np.where(take1, p1, p2)
        return np.einsum("ab,na,nb->n", p["w"], q, y), (x, y, q, take1)
    basis = pot.basis
    t = np.tanh(x[:, :, None] * basis["beta"][None, None, :] + basis["c"][None, None, :])
    e = t @ basis["alpha"]
    return np.einsum("ab,nb,na->n", pot.params["w"], y, e), (x, y, t, e)


def _pair_backward(pot: PairPotential, cache, s: np.ndarray):
    """s is dloss/dcontribution, shape (B,). Returns (grads, gx, gy)."""
    if pot.kind == "abs_mlp":
        x, y, u, v, vm, tape = cache
        p = pot.params
        w2 = p["w2"]
        g_w1 = np.einsum("n,nab->ab", s, np.abs(v))
        g_w1m = np.einsum("n,nab->ab", s, np.abs(vm))
        sv = s[:, None, None] * p["w1"][None] * np.sign(v)
        svm = s[:, None, None] * p["w1m"][None] * np.sign(vm)
        sp, sm = sv + svm, sv - svm
        g_w2 = np.einsum("nab,nb->ab", sp, y)
        g_w2 += np.einsum("nab,nab->ab", sm, np.sign(w2)[None] * u[:, :, None])
        gy = np.einsum("nab,ab->nb", sp, w2)
        gu = np.einsum("nab,ab->na", sm, np.abs(w2))
        grads = {"w1": g_w1, "w1m": g_w1m, "w2": g_w2}
        if tape is None:
            grads["gu"] = gu
            return grads, None, gy
        mlp_grads, gx_flat = diffnet.backward(tape, gu.reshape(-1, 1))
        gx = gx_flat.reshape(x.shape)
        grads["mlp"] = mlp_grads
        return grads, gx, gy
    if pot.kind == "maxout_bilinear":
        x, y, q, take1 = cache
        p = pot.params
        g_w = np.einsum("n,na,nb->ab", s, q, y)
        gy = np.einsum("n,ab,na->nb", s, p["w"], q)
        gq = np.einsum("n,ab,nb->na", s, p["w"], y)
        g1 = np.where(take1, gq, 0.0)
        g2 = np.where(take1, 0.0, gq)
        grads = {
            "w": g_w,
            "a1": np.array((g1 * (x - p["b1"])).sum()),
            "a2": np.array((g2 * (x - p["b2"])).sum()),
            "b1": np.array((-g1 * p["a1"]).sum()),
            "b2": np.array((-g2 * p["a2"]).sum()),
        }
        gx = g1 * p["a1"] + g2 * p["a2"]
        return grads, gx, gy
    x, y, t, e = cache
    w = pot.params["w"]
    basis = pot.basis
    g_w = np.einsum("n,na,nb->ab", s, e, y)
    gy = np.einsum("n,ab,na->nb", s, w, e)
    ge = np.einsum("n,ab,nb->na", s, w, y)
    u = ge[:, :, None] * (1.0 - t * t) * basis["alpha"][None, None, :]
    grads = {
        "w": g_w,
        "basis.alpha": np.einsum("na,nak->k", ge, t),
        "basis.beta": np.einsum("nak,na->k", u, x),
        "basis.c": u.sum(axis=(0, 1)),
    }
    return grads, u @ basis["beta"], gy


def _pairs_forward_stacked(model: RegressionModel, zs, pair_u):
    """All abs_mlp pair blocks at once for equal group widths. Returns the
    summed contribution (B,) and a cache for the stacked backward."""
    keys = list(model.pairs.keys())
    U = np.stack([pair_u[k] for k in keys])
    Y = np.stack([zs[j] for _, j in keys])
    W1 = np.stack([model.pairs[k].params["w1"] for k in keys])
    W1m = np.stack([model.pairs[k].params["w1m"] for k in keys])
    W2 = np.stack([model.pairs[k].params["w2"] for k in keys])
    wy = W2[:, None] * Y[:, :, None, :]
    wu = np.abs(W2)[:, None] * U[:, :, :, None]
    v, vm = wy + wu, wy - wu
    contrib = np.einsum("pab,pnab->n", W1, np.abs(v))
    contrib += np.einsum("pab,pnab->n", W1m, np.abs(vm))
    return contrib, (keys, U, Y, W1, W1m, W2, v, vm)


def _pairs_backward_stacked(model: RegressionModel, cache, s, gz, grads):
    """Backward mate of _pairs_forward_stacked. Accumulates latent gradients
    into gz, writes per-pair parameter gradients into grads, and returns the
    per-pair pullbacks for the shared networks."""
    keys, U, Y, W1, W1m, W2, v, vm = cache
    g_W1 = np.einsum("n,pnab->pab", s, np.abs(v))
    g_W1m = np.einsum("n,pnab->pab", s, np.abs(vm))
    sv = s[None, :, None, None] * W1[:, None] * np.sign(v)
    svm = s[None, :, None, None] * W1m[:, None] * np.sign(vm)
    sp = sv + svm
    sm = sv - svm
    g_W2 = np.einsum("pnab,pnb->pab", sp, Y)
    g_W2 += np.einsum("pnab,pna->pab", sm, U) * np.sign(W2)
    gy = np.einsum("pnab,pab->pnb", sp, W2)
    gu = np.einsum("pnab,pab->pna", sm, np.abs(W2))
    pending = {}
    for p, (i, j) in enumerate(keys):
        gz[j] += gy[p]
        pending[(i, j)] = gu[p]
        grads[f"pair.{i}.{j}.w1"] = g_W1[p]
        grads[f"pair.{i}.{j}.w1m"] = g_W1m[p]
        grads[f"pair.{i}.{j}.w2"] = g_W2[p]
    return pending


# ------------------------------------------------------------- loss + grads


def loss_and_grads(
    model: RegressionModel, pos: np.ndarray, neg: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean logistic loss over the positive and negative rows, with exact
    reverse-mode gradients for every trainable array."""
    if pos.shape != neg.shape or pos.shape[1] != sum(model.dims):
        raise UsageError("positive and negative batches must share the data shape")
    X = np.vstack([pos, neg])
    B = pos.shape[0]
    two_b = 2 * B

    zs, h_tapes = [], []
    for m in range(model.M):
        block = X[:, model.group_slice(m)]
        net = model.h_nets[m]
        if net is None:
            zs.append(block)
            h_tapes.append(None)
        else:
            z, tape = diffnet.forward(net, block)
            zs.append(z)
            h_tapes.append(tape)

    r = np.full(two_b, model.offset[0])
    gp_tapes = []
    for m, net in enumerate(model.group_pots):
        val, tape = diffnet.forward(net, zs[m])
        r += val[:, 0]
        gp_tapes.append(tape)
    # the shared pair network sees both groups' latents; one pass over the
    # concatenated rows replaces a pass per direction block
    pair_u, mlp_joint = {}, {}
    for (i, j), pot in model.pairs.items():
        if pot.mlp is None or (i, j) in pair_u:
            continue
        lo, hi = (i, j) if i < j else (j, i)
        stacked = np.vstack([zs[lo].reshape(-1, 1), zs[hi].reshape(-1, 1)])
        flat, tape = diffnet.forward(pot.mlp, stacked)
        cut = zs[lo].size
        pair_u[(lo, hi)] = flat[:cut].reshape(zs[lo].shape)
        pair_u[(hi, lo)] = flat[cut:].reshape(zs[hi].shape)
        mlp_joint[(lo, hi)] = (tape, cut)
    stacked = model.psi.kind == "abs_mlp" and len(set(model.dims)) == 1
    pair_caches: dict = {}
    if stacked:
        contrib, stack_cache = _pairs_forward_stacked(model, zs, pair_u)
        r += contrib
    else:
        for key, pot in model.pairs.items():
            contrib, cache = _pair_forward(pot, zs[key[0]], zs[key[1]], u=pair_u.get(key))
            r += contrib
            pair_caches[key] = cache

    # labels: first half original, second half shuffled
    loss = (np.logaddexp(0.0, -r[:B]).sum() + np.logaddexp(0.0, r[B:]).sum()) / two_b
    dr = expit(r)
    dr[:B] -= 1.0
    dr /= two_b

    grads: dict[str, np.ndarray] = {"offset": np.array([dr.sum()])}
    gz = [np.zeros_like(z) for z in zs]
    for m, tape in enumerate(gp_tapes):
        g, dz = diffnet.backward(tape, dr[:, None])
        gz[m] += dz
        for li, p in enumerate(g):
            for pkey, arr in p.items():
                grads[f"gp.{m}.{li}.{pkey}"] = arr
    pending_gu = {}
    if stacked:
        pending_gu = _pairs_backward_stacked(model, stack_cache, dr, gz, grads)
    else:
        for (i, j), pot in model.pairs.items():
            pg, gx, gy = _pair_backward(pot, pair_caches[(i, j)], dr)
            if gx is not None:
                gz[i] += gx
            gz[j] += gy
            for pkey, arr in pg.items():
                if pkey == "gu":
                    pending_gu[(i, j)] = arr
                elif pkey.startswith("basis."):
                    key = f"psi.{pkey[6:]}"
                    if key in grads:
                        grads[key] = grads[key] + arr
                    else:
                        grads[key] = arr
                else:
                    grads[f"pair.{i}.{j}.{pkey}"] = arr
    # one backward through each shared pair network, both blocks' pullbacks
    for (lo, hi), (tape, cut) in mlp_joint.items():
        gu_cat = np.vstack([
            pending_gu[(lo, hi)].reshape(-1, 1),
            pending_gu[(hi, lo)].reshape(-1, 1),
        ])
        mlp_grads, gin = diffnet.backward(tape, gu_cat)
        gz[lo] += gin[:cut].reshape(zs[lo].shape)
        gz[hi] += gin[cut:].reshape(zs[hi].shape)
        for li, p in enumerate(mlp_grads):
            for mk, marr in p.items():
                grads[f"pair.{lo}.{hi}.mlp.{li}.{mk}"] = marr
    for m, tape in enumerate(h_tapes):
        if tape is None:
            continue
        g, _ = diffnet.backward(tape, gz[m])
        for li, p in enumerate(g):
            for pkey, arr in p.items():
                grads[f"h.{m}.{li}.{pkey}"] = arr
    return float(loss), grads


# ----------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: RegressionModel
    trace: list[tuple[int, float]]  # (iteration, loss) rows
    final_loss: float


def train(model: RegressionModel, dataset: GroupedDataset, cfg: TrainConfig) -> TrainResult:
    """Minibatch SGD with momentum and a single step-down in the learning
    rate at two thirds of the run. Raises TrainingDiverged when the loss sits
    above the ceiling for divergence_patience consecutive iterations, and
    NumericFailure on any non-finite loss or gradient."""
    if list(dataset.dims) != list(model.dims):
        raise UsageError("dataset group dims do not match the model")
    X = dataset.values
    rng = np.random.default_rng([int(cfg.seed), 3])
    reg = trainable_arrays(model)
    vel = {k: np.zeros_like(v) for k, v in reg.items()}
    drop_at = (2 * cfg.n_iters) // 3
    trace: list[tuple[int, float]] = []
    loss = LN2
    bad = 0
    for it in range(cfg.n_iters):
        pos, neg = build_shuffled_batch(rng, X, model.dims, cfg.batch_size)
        loss, grads = loss_and_grads(model, pos, neg)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at iteration {it}")
        bad = bad + 1 if loss > cfg.divergence_ceiling else 0
        if bad >= cfg.divergence_patience:
            raise TrainingDiverged(
                f"loss above {cfg.divergence_ceiling:.3f} for "
                f"{cfg.divergence_patience} consecutive iterations (at {it})"
            )
        for key, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericFailure(f"non-finite gradient in {key!r}; step aborted")
        lr = cfg.lr * (cfg.lr_drop_factor if it >= drop_at else 1.0)
        for key, g in grads.items():
            diffnet.apply_momentum(reg[key], g, vel[key], lr, cfg.momentum)
        for pot in model.pairs.values():
            # projected step: the tent coefficients stay nonpositive, so a
            # pair term is a downward tent in its second argument. A reversed
            # tent cannot imitate one, and that asymmetry is what lets the
            # coupling weights pick the edge direction.
            if pot.kind == "abs_mlp":
                np.minimum(pot.params["w1"], 0.0, out=pot.params["w1"])
                np.minimum(pot.params["w1m"], 0.0, out=pot.params["w1m"])
        if it % cfg.eval_every == 0:
            trace.append((it, loss))
    if not trace or trace[-1][0] != cfg.n_iters - 1:
        trace.append((cfg.n_iters - 1, loss))
    return TrainResult(model, trace, loss)


# --------------------------------------------------------------- extraction


def extract_latents(
    model: RegressionModel, X: np.ndarray, chunk: int = 65536
) -> np.ndarray:
    """Concatenated group features h^m(x^m): the latent estimates."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != sum(model.dims):
        raise UsageError("data width does not match the model dims")
    out = np.empty_like(X)
    for lo in range(0, X.shape[0], chunk):
        hi = min(lo + chunk, X.shape[0])
        for m in range(model.M):
            sl = model.group_slice(m)
            net = model.h_nets[m]
            block = X[lo:hi, sl]
            out[lo:hi, sl] = block if net is None else diffnet.predict(net, block)
    return out


def extract_graph(model: RegressionModel) -> np.ndarray:
    """Estimated inter-group coupling strengths, one scalar per ordered
    coordinate pair; intra-group blocks are zero (not modeled). For abs_mlp
    the coupling scale is the combined tent coefficient times |w2|, for the
    bilinear families it is w."""
    D = sum(model.dims)
    L = np.zeros((D, D))
    for (i, j), pot in model.pairs.items():
        if pot.kind == "abs_mlp":
            w1 = pot.params["w1"] + pot.params["w1m"]
            block = w1 * np.abs(pot.params["w2"])
        else:
            block = pot.params["w"]
        L[model.group_slice(i), model.group_slice(j)] = block
    return L


# ------------------------------------------------------------ serialization


def _net_doc(net: Network | None):
    return None if net is None else json.loads(diffnet.to_json(net))


def _net_from_doc(doc) -> Network | None:
    return None if doc is None else diffnet.from_json(json.dumps(doc))


def _array_block(d: dict[str, np.ndarray]):
    return {k: {"shape": list(v.shape), "data": _encode_block(v)} for k, v in d.items()}


def model_to_json(model: RegressionModel) -> str:
    pairs = {}
    for (i, j), pot in model.pairs.items():
        entry = {
            "kind": pot.kind,
            "params": _array_block(pot.params),
            # the shared network is stored once, on the lower-indexed pair
            "mlp": _net_doc(pot.mlp) if i < j else None,
        }
        pairs[f"{i},{j}"] = entry
    doc = {
        "version": MODEL_FORMAT_VERSION,
        "dims": [int(d) for d in model.dims],
        "depth": int(model.depth),
        "psi": {
            "kind": model.psi.kind,
            "hidden": model.psi.hidden,
            "n_terms": model.psi.n_terms,
            "mlp_scope": model.psi.mlp_scope,
            "piece_scope": model.psi.piece_scope,
            "basis_scope": model.psi.basis_scope,
        },
        "seed": int(model.seed),
        "offset": float(model.offset[0]),
        "h_nets": [_net_doc(n) for n in model.h_nets],
        "group_pots": [_net_doc(n) for n in model.group_pots],
        "pairs": pairs,
        "psi_basis": None if model.psi_basis is None else _array_block(model.psi_basis),
    }
    return json.dumps(doc, sort_keys=True)


def model_from_json(doc: str) -> RegressionModel:
    data = json.loads(doc)
    if data.get("version") != MODEL_FORMAT_VERSION:
        raise UsageError(f"unsupported model format: {data.get('version')!r}")

    def arrays(block):
        return {
            k: _decode_block(v["data"], tuple(v["shape"])) for k, v in block.items()
        }

    basis = None if data["psi_basis"] is None else arrays(data["psi_basis"])
    pairs = {}
    for key, entry in data["pairs"].items():
        i, j = (int(t) for t in key.split(","))
        pairs[(i, j)] = PairPotential(
            entry["kind"],
            arrays(entry["params"]),
            mlp=_net_from_doc(entry["mlp"]),
            basis=basis,
        )
    for (i, j), pot in pairs.items():
        if pot.kind == "abs_mlp" and i > j:
            pot.mlp = pairs[(j, i)].mlp
    psi = PsiSpec(**data["psi"])
    return RegressionModel(
        [int(d) for d in data["dims"]],
        int(data["depth"]),
        psi,
        [_net_from_doc(n) for n in data["h_nets"]],
        [_net_from_doc(n) for n in data["group_pots"]],
        pairs,
        np.array([float(data["offset"])]),
        int(data["seed"]),
        psi_basis=basis,
    )
