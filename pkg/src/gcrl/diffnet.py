"""Dense feed-forward networks with exact reverse-mode gradients.

Pure numpy, float64 everywhere. A network is a sequential stack of layers
(affine, leaky_relu, maxout, tanh). Every forward pass records a single-use
tape; backward consumes the tape and returns parameter gradients congruent
with the network's parameter structure plus the gradient w.r.t. the input.

The optimizer is classical Polyak momentum:

    v <- momentum * v - lr * g
    theta <- theta + v

Networks serialize to a versioned JSON document with raw little-endian
float64 parameter blocks (base64), so round-trips are bit-exact.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

FORMAT_VERSION = "diffnet/1"

LAYER_KINDS = ("affine", "leaky_relu", "maxout", "tanh")


class UsageError(RuntimeError):
    """Misuse of the engine's API (bad shapes, reused tapes, bad specs)."""


class NumericFailure(RuntimeError):
    """A computation produced non-finite values where finite ones are required."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential network.

    kind       one of LAYER_KINDS
    in_dim     input width
    out_dim    output width; activation layers require out_dim == in_dim
    slope      negative-side slope, leaky_relu only
    pieces     number of affine pieces, maxout only (max is taken across them)
    """

    kind: str
    in_dim: int
    out_dim: int
    slope: float = 0.0
    pieces: int = 0

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise UsageError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise UsageError("layer dims must be positive")
        if self.kind in ("leaky_relu", "tanh") and self.in_dim != self.out_dim:
            raise UsageError(f"{self.kind} requires in_dim == out_dim")
        if self.kind == "leaky_relu" and not np.isfinite(self.slope):
            raise UsageError("leaky_relu slope must be finite")
        if self.kind == "maxout" and self.pieces < 1:
            raise UsageError("maxout requires pieces >= 1")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "affine":
            return {"W": (self.in_dim, self.out_dim), "b": (self.out_dim,)}
        if self.kind == "maxout":
            return {
                "W": (self.pieces, self.in_dim, self.out_dim),
                "b": (self.pieces, self.out_dim),
            }
        return {}


@dataclass
class Network:
    layers: list[LayerSpec]
    params: list[dict[str, np.ndarray]]

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def n_params(self) -> int:
        return sum(int(a.size) for p in self.params for a in p.values())


@dataclass
class Tape:
    """Record of one forward pass. Consumed exactly once by backward()."""

    net: Network
    caches: list[tuple]
    batched: bool
    consumed: bool = False


@dataclass
class OptimizerState:
    lr: float
    momentum: float
    velocity: list[dict[str, np.ndarray]] = field(default_factory=list)


def build_network(specs: list[LayerSpec], init_seed: int) -> Network:
    """Build a network with uniform U[-sqrt(1/fan_in), +sqrt(1/fan_in)] weights
    and zero biases. Layers must chain: each in_dim equals the previous out_dim.
    """
    if not specs:
        raise UsageError("a network needs at least one layer")
    for prev, cur in zip(specs, specs[1:]):
        if cur.in_dim != prev.out_dim:
            raise UsageError(
                f"layer chain broken: out_dim {prev.out_dim} -> in_dim {cur.in_dim}"
            )
    rng = np.random.default_rng(init_seed)
    params: list[dict[str, np.ndarray]] = []
    for spec in specs:
        layer_params: dict[str, np.ndarray] = {}
        shapes = spec.param_shapes()
        if shapes:
            bound = np.sqrt(1.0 / spec.in_dim)
            layer_params["W"] = rng.uniform(-bound, bound, size=shapes["W"])
            layer_params["b"] = np.zeros(shapes["b"])
        params.append(layer_params)
    return Network(list(specs), params)


def _as_batch(x: np.ndarray, in_dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != in_dim:
            raise UsageError(f"input width {x.shape[0]} != network in_dim {in_dim}")
        return x[None, :], False
    if x.ndim == 2:
        if x.shape[1] != in_dim:
            raise UsageError(f"input width {x.shape[1]} != network in_dim {in_dim}")
        return x, True
    raise UsageError("input must be a vector or a (batch, dim) matrix")


def _layer_forward(spec: LayerSpec, p: dict[str, np.ndarray], x: np.ndarray):
    if spec.kind == "affine":
        return x @ p["W"] + p["b"], (x,)
    if spec.kind == "leaky_relu":
        pos = x > 0.0
        return np.where(pos, x, spec.slope * x), (pos,)
    if spec.kind == "tanh":
        y = np.tanh(x)
        return y, (y,)
    # maxout: z[b, piece, out]; ties resolve to the lowest piece index
    z = np.einsum("bi,pio->bpo", x, p["W"]) + p["b"][None, :, :]
    winner = np.argmax(z, axis=1)
    y = np.take_along_axis(z, winner[:, None, :], axis=1)[:, 0, :]
    return y, (x, winner)


def forward(net: Network, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Run the network, recording a tape for backward(). Accepts a single
    vector or a (batch, in_dim) matrix; the output matches the input's rank.
    """
    h, batched = _as_batch(x, net.in_dim)
    caches = []
    for spec, p in zip(net.layers, net.params):
        h, cache = _layer_forward(spec, p, h)
        caches.append(cache)
    tape = Tape(net=net, caches=caches, batched=batched)
    return (h if batched else h[0]), tape


def predict(net: Network, x: np.ndarray) -> np.ndarray:
    """Forward pass without tape bookkeeping (no backward possible)."""
    h, batched = _as_batch(x, net.in_dim)
    for spec, p in zip(net.layers, net.params):
        h, _ = _layer_forward(spec, p, h)
    return h if batched else h[0]


def backward(tape: Tape, upstream: np.ndarray):
    """Reverse-mode gradients for the pass recorded on the tape.

    upstream must match the forward output's shape. Returns (grads, dx)
    where grads is congruent with net.params. Tapes are single-use; a
    second call raises UsageError.
    """
    if tape.consumed:
        raise UsageError("tape already consumed; run forward() again")
    tape.consumed = True
    net = tape.net
    g = np.asarray(upstream, dtype=np.float64)
    if not tape.batched:
        g = g[None, :]
    if g.shape[1] != net.out_dim:
        raise UsageError(f"upstream width {g.shape[1]} != network out_dim {net.out_dim}")

    grads: list[dict[str, np.ndarray]] = [{} for _ in net.layers]
    for idx in range(len(net.layers) - 1, -1, -1):
        spec = net.layers[idx]
        p = net.params[idx]
        cache = tape.caches[idx]
        if spec.kind == "affine":
            (x,) = cache
            grads[idx] = {"W": x.T @ g, "b": g.sum(axis=0)}
            g = g @ p["W"].T
        elif spec.kind == "leaky_relu":
            (pos,) = cache
            g = g * np.where(pos, 1.0, spec.slope)
        elif spec.kind == "tanh":
            (y,) = cache
            g = g * (1.0 - y * y)
        else:
            x, winner = cache
            dz = np.zeros((g.shape[0], spec.pieces, spec.out_dim))
            np.put_along_axis(dz, winner[:, None, :], g[:, None, :], axis=1)
            grads[idx] = {
                "W": np.einsum("bi,bpo->pio", x, dz),
                "b": dz.sum(axis=0),
            }
            g = np.einsum("bpo,pio->bi", dz, p["W"])
    dx = g if tape.batched else g[0]
    return grads, dx


def apply_momentum(
    param: np.ndarray, grad: np.ndarray, vel: np.ndarray, lr: float, momentum: float
) -> None:
    """In-place Polyak momentum update of a single parameter array."""
    vel *= momentum
    vel -= lr * grad
    param += vel


def sgd_step(net: Network, grads: list[dict[str, np.ndarray]], state: OptimizerState) -> None:
    """One momentum step over all network parameters, in place.

    A non-finite gradient aborts the whole step (no partial update) and
    reports the offending layer.
    """
    if not state.velocity:
        state.velocity = [
            {k: np.zeros_like(a) for k, a in p.items()} for p in net.params
        ]
    for idx, (p, g) in enumerate(zip(net.params, grads)):
        for key in p:
            if not np.all(np.isfinite(g[key])):
                kind = net.layers[idx].kind
                raise NumericFailure(
                    f"non-finite gradient in layer {idx} ({kind}, param {key!r}); step aborted"
                )
    for p, g, v in zip(net.params, grads, state.velocity):
        for key in p:
            apply_momentum(p[key], g[key], v[key], state.lr, state.momentum)


def _encode_block(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode_block(s: str, shape: tuple[int, ...]) -> np.ndarray:
    raw = base64.b64decode(s.encode("ascii"))
    a = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if a.size != int(np.prod(shape)):
        raise UsageError(f"parameter block has {a.size} values, expected shape {shape}")
    return a.reshape(shape)


def to_json(net: Network) -> str:
    layers = []
    for spec, p in zip(net.layers, net.params):
        entry = {
            "kind": spec.kind,
            "in_dim": spec.in_dim,
            "out_dim": spec.out_dim,
        }
        if spec.kind == "leaky_relu":
            entry["slope"] = spec.slope
        if spec.kind == "maxout":
            entry["pieces"] = spec.pieces
        for key, a in p.items():
            entry[key] = _encode_block(a)
        layers.append(entry)
    return json.dumps({"version": FORMAT_VERSION, "layers": layers}, sort_keys=True)


def from_json(doc: str) -> Network:
    data = json.loads(doc)
    if data.get("version") != FORMAT_VERSION:
        raise UsageError(f"unsupported network format {data.get('version')!r}")
    specs = []
    params = []
    for entry in data["layers"]:
        spec = LayerSpec(
            kind=entry["kind"],
            in_dim=int(entry["in_dim"]),
            out_dim=int(entry["out_dim"]),
            slope=float(entry.get("slope", 0.0)),
            pieces=int(entry.get("pieces", 0)),
        )
        specs.append(spec)
        p = {}
        for key, shape in spec.param_shapes().items():
            p[key] = _decode_block(entry[key], shape)
        params.append(p)
    net = Network(specs, params)
    for prev, cur in zip(specs, specs[1:]):
        if cur.in_dim != prev.out_dim:
            raise UsageError("layer chain broken in serialized network")
    return net
