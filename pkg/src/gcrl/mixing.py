"""Group-wise nonlinear observation models.

Each group of observable latents is pushed through its own invertible MLP:
depth L alternates square affine maps with leaky ReLUs (slope 0.2) and ends
with a plain affine layer, so L=1 is a single linear map and L=0 is the
identity (no network at all). Affine weights are drawn Haar-orthogonal via
the QR decomposition of a Gaussian matrix (signs fixed so the distribution
is uniform over the orthogonal group) and biases are zero, which keeps every
layer perfectly conditioned; a redraw guard still rejects any weight matrix
whose condition number exceeds COND_LIMIT, for safety if the scale or init
family is ever changed.

mix() drops confounder columns first, so the observed dataset only ever sees
observable coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import diffnet
from .diffnet import LayerSpec, Network, NumericFailure, UsageError
from .latent_sampler import LatentSamples, mask_confounders

MIXING_FORMAT_VERSION = "gcarl-mixing/1"
COND_LIMIT = 1e3
LEAKY_SLOPE = 0.2


@dataclass
class MixingModel:
    dims: list[int]  # observable dims per group
    nets: list[Network | None]  # None marks the identity map
    depth: int
    seed: int

    @property
    def M(self) -> int:
        return len(self.dims)


@dataclass
class GroupedDataset:
    """Observed data: rows are samples, columns concatenated group blocks."""

    values: np.ndarray  # (n, sum(dims))
    dims: list[int]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != sum(self.dims):
            raise UsageError("dataset width must equal the summed group dims")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def group_block(self, m: int) -> np.ndarray:
        start = sum(self.dims[:m])
        return self.values[:, start : start + self.dims[m]]


def _orthogonal(rng: np.random.Generator, d: int, scale: float) -> np.ndarray:
    for _ in range(32):
        q, r = np.linalg.qr(rng.normal(size=(d, d)))
        diag = np.diag(r)
        q = q * np.where(diag == 0.0, 1.0, np.sign(diag))[None, :]
        w = scale * q
        if np.linalg.cond(w) <= COND_LIMIT:
            return w
    raise NumericFailure("could not draw a well-conditioned mixing matrix")


def _group_net(rng: np.random.Generator, d: int, depth: int) -> Network:
    specs: list[LayerSpec] = []
    params: list[dict[str, np.ndarray]] = []
    for layer in range(depth):
        specs.append(LayerSpec("affine", d, d))
        params.append({"W": _orthogonal(rng, d, 1.0), "b": np.zeros(d)})
        if layer < depth - 1:
            specs.append(LayerSpec("leaky_relu", d, d, slope=LEAKY_SLOPE))
            params.append({})
    return Network(specs, params)


def gen_mixing(dims: list[int], depth: int, seed: int) -> MixingModel:
    """Independent observation network per group; depth 0 means identity."""
    if depth < 0:
        raise UsageError("mixing depth must be non-negative")
    if not dims or any(d < 1 for d in dims):
        raise UsageError("every group needs at least one observable dim")
    nets: list[Network | None] = []
    for m, d in enumerate(dims):
        if depth == 0:
            nets.append(None)
            continue
        rng = np.random.default_rng([int(seed), m])
        nets.append(_group_net(rng, d, depth))
    return MixingModel(list(dims), nets, depth, int(seed))


def mix(
    model: MixingModel, samples: LatentSamples, metadata: dict | None = None
) -> GroupedDataset:
    """Apply the observation networks to the observable latent coordinates."""
    obs = mask_confounders(samples)
    if list(obs.dims) != list(model.dims):
        raise UsageError(
            f"observable dims {list(obs.dims)} do not match the model's {model.dims}"
        )
    blocks = []
    start = 0
    for net, d in zip(model.nets, model.dims):
        block = obs.values[:, start : start + d]
        blocks.append(block if net is None else diffnet.predict(net, block))
        start += d
    meta = {"mixing_seed": model.seed, "mixing_depth": model.depth}
    if metadata:
        meta.update(metadata)
    return GroupedDataset(np.concatenate(blocks, axis=1), list(model.dims), meta)


def mixing_to_json(model: MixingModel) -> str:
    doc = {
        "version": MIXING_FORMAT_VERSION,
        "dims": [int(d) for d in model.dims],
        "depth": int(model.depth),
        "seed": int(model.seed),
        "nets": [
            None if net is None else json.loads(diffnet.to_json(net))
            for net in model.nets
        ],
    }
    return json.dumps(doc, sort_keys=True)


def mixing_from_json(doc: str) -> MixingModel:
    data = json.loads(doc)
    if data.get("version") != MIXING_FORMAT_VERSION:
        raise UsageError(f"unsupported mixing format: {data.get('version')!r}")
    nets = [
        None if net is None else diffnet.from_json(json.dumps(net))
        for net in data["nets"]
    ]
    return MixingModel([int(d) for d in data["dims"]], nets, int(data["depth"]), int(data["seed"]))
