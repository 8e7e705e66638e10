"""Graph-convolutional forecaster with a learned adjacency and node-specific weights.

The adjacency is built from a node-embedding dictionary as
``row_softmax(relu(E_A @ E_A.T))`` and each layer computes, per node ``i``,

    Z[i] = ((I + A) X)[i] @ Theta[i] + bias[i]
    Theta = E_G . W_pool,   bias = E_G @ b_pool

so every node draws its own weights from a shared pool through its embedding
row. The static-graph, shared-weight ablation used by the plain federated
baselines is the same network with ``A`` fixed to the uniform matrix and
``E_G`` fixed to a column of ones (pool depth 1).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import numkit as nk
from .numkit import DimensionError, Tensor


@dataclass(frozen=True)
class Architecture:
    """Shape descriptor of a forecaster.

    ``adaptive_graph`` / ``node_specific`` switch off the learned adjacency
    and the per-node weight factorisation respectively (ablation model).
    """

    history: int = 12
    horizon: int = 12
    in_features: int = 1
    out_features: int = 1
    hidden: int = 32
    layers: int = 2
    embed_dim: int = 10
    pool_dim: int = 10
    adaptive_graph: bool = True
    node_specific: bool = True

    def __post_init__(self):
        for name in ("history", "horizon", "in_features", "out_features", "hidden", "layers",
                     "embed_dim", "pool_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"architecture field {name!r} must be positive")

    @property
    def input_width(self) -> int:
        return self.history * self.in_features

    @property
    def output_width(self) -> int:
        return self.horizon * self.out_features

    @property
    def effective_pool_dim(self) -> int:
        return self.pool_dim if self.node_specific else 1

    def layer_widths(self) -> list[tuple[int, int]]:
        """(input width, output width) per layer."""
        dims = [self.input_width] + [self.hidden] * (self.layers - 1) + [self.output_width]
        return list(zip(dims[:-1], dims[1:]))

    def ablation(self) -> "Architecture":
        return replace(self, adaptive_graph=False, node_specific=False)


@dataclass
class ModelParams:
    """Learnable state of one forecaster.

    ``ea`` (N×d) feeds the adjacency, ``eg`` (N×d') selects weights from the
    pools. Either is ``None`` when the architecture disables it. ``weights[l]``
    has shape d'×C×F and ``biases[l]`` d'×F.
    """

    arch: Architecture
    ea: np.ndarray | None
    eg: np.ndarray | None
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    @property
    def num_nodes(self) -> int | None:
        for e in (self.ea, self.eg):
            if e is not None:
                return e.shape[0]
        return None

    def blocks(self) -> list[tuple[str, np.ndarray]]:
        """Named parameter arrays in serialization order."""
        out = []
        if self.ea is not None:
            out.append(("ea", self.ea))
        if self.eg is not None:
            out.append(("eg", self.eg))
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"w{i}", w))
            out.append((f"b{i}", b))
        return out

    def arrays(self) -> list[np.ndarray]:
        return [a for _, a in self.blocks()]

    def with_arrays(self, arrays: list[np.ndarray]) -> "ModelParams":
        """Same layout, new values (in :meth:`blocks` order)."""
        it = iter(arrays)
        ea = np.array(next(it), dtype=np.float64) if self.ea is not None else None
        eg = np.array(next(it), dtype=np.float64) if self.eg is not None else None
        ws, bs = [], []
        for _ in self.weights:
            ws.append(np.array(next(it), dtype=np.float64))
            bs.append(np.array(next(it), dtype=np.float64))
        return ModelParams(self.arch, ea, eg, ws, bs)

    def copy(self) -> "ModelParams":
        return self.with_arrays(self.arrays())

    def pools(self) -> list[np.ndarray]:
        return [a for name, a in self.blocks() if name[0] in "wb"]

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    @property
    def nbytes(self) -> int:
        return 8 * self.size

    def rows(self, lo: int, hi: int) -> "ModelParams":
        """View restricted to nodes [lo, hi); pools are copied whole."""
        ea = self.ea[lo:hi].copy() if self.ea is not None else None
        eg = self.eg[lo:hi].copy() if self.eg is not None else None
        return ModelParams(self.arch, ea, eg, [w.copy() for w in self.weights],
                           [b.copy() for b in self.biases])

    def to_bytes(self) -> bytes:
        """Little-endian float64, blocks concatenated row-major in :meth:`blocks` order."""
        return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.arrays())

    @classmethod
    def from_bytes(cls, buf: bytes, arch: Architecture, num_nodes: int) -> "ModelParams":
        template = init_params(arch, num_nodes, seed=0)
        expected = template.nbytes
        if len(buf) != expected:
            raise ValueError(f"parameter payload has {len(buf)} bytes, layout needs {expected}")
        flat = np.frombuffer(buf, dtype="<f8").astype(np.float64)
        arrays, pos = [], 0
        for a in template.arrays():
            arrays.append(flat[pos:pos + a.size].reshape(a.shape))
            pos += a.size
        return template.with_arrays(arrays)

    def allclose(self, other: "ModelParams", atol: float = 0.0) -> bool:
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(
            x.shape == y.shape and np.allclose(x, y, rtol=0.0, atol=atol) for x, y in zip(a, b)
        )


def init_params(arch: Architecture, num_nodes: int, seed: int) -> ModelParams:
    """Embeddings ~ 0.1 * N(0, 1); pools ~ U(-1/sqrt(C), 1/sqrt(C))."""
    if num_nodes < 1:
        raise ValueError("num_nodes must be >= 1")
    rng = np.random.default_rng(seed)
    ea = 0.1 * rng.standard_normal((num_nodes, arch.embed_dim)) if arch.adaptive_graph else None
    eg = 0.1 * rng.standard_normal((num_nodes, arch.pool_dim)) if arch.node_specific else None
    d = arch.effective_pool_dim
    ws, bs = [], []
    for c, f in arch.layer_widths():
        bound = 1.0 / math.sqrt(c)
        ws.append(rng.uniform(-bound, bound, size=(d, c, f)))
        bs.append(rng.uniform(-bound, bound, size=(d, f)))
    return ModelParams(arch, ea, eg, ws, bs)


# ---------------------------------------------------------------- operations


def ldigc_adjacency(ea: Tensor) -> Tensor:
    """Row-stochastic adjacency softmax(relu(E E^T)) learned from node embeddings."""
    ea = nk.as_tensor(ea)
    return nk.row_softmax(nk.relu(nk.matmul(ea, nk.transpose(ea))))


def uniform_adjacency(n: int) -> Tensor:
    return Tensor(np.full((n, n), 1.0 / n))


def nomor_theta(eg: Tensor, pool: Tensor) -> Tensor:
    """Per-node weights Theta[i] = sum_k eg[i, k] * pool[k]."""
    return nk.pool_contract(eg, pool)


def nomor_bias(eg: Tensor, pool: Tensor) -> Tensor:
    return nk.matmul(eg, pool)


def gcn_layer(x: Tensor, adj: Tensor, theta: Tensor, bias: Tensor) -> Tensor:
    """One graph convolution where node i applies its own slice theta[i]."""
    h = nk.propagate(adj, x)
    return nk.add_node_bias(nk.node_contract(h, theta), bias)


@dataclass
class ForwardParams:
    """Tensor views of a ModelParams, created once per forward/backward pass."""

    ea: Tensor | None
    eg: Tensor | None
    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def of(cls, p: ModelParams, requires_grad: bool = False) -> "ForwardParams":
        def t(a, name):
            return None if a is None else Tensor(a, requires_grad=requires_grad, name=name)

        return cls(
            t(p.ea, "ea"),
            t(p.eg, "eg"),
            [t(w, f"w{i}") for i, w in enumerate(p.weights)],
            [t(b, f"b{i}") for i, b in enumerate(p.biases)],
        )

    def tensors(self) -> list[Tensor]:
        out = [x for x in (self.ea, self.eg) if x is not None]
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def forward_tensors(arch: Architecture, fp: ForwardParams, x: Tensor) -> Tensor:
    """Differentiable forward pass on tensor parameters."""
    x = nk.as_tensor(x)
    n = x.shape[-2]
    if x.shape[-1] != arch.input_width:
        raise DimensionError(
            f"model_forward: input width {x.shape[-1]} != history*in_features = {arch.input_width}"
        )
    if arch.adaptive_graph:
        if fp.ea is None or fp.ea.shape[0] != n:
            raise DimensionError(f"model_forward: embedding rows do not match {n} input nodes")
        adj = ldigc_adjacency(fp.ea)
    else:
        adj = uniform_adjacency(n)
    if arch.node_specific:
        if fp.eg is None or fp.eg.shape[0] != n:
            raise DimensionError(f"model_forward: embedding rows do not match {n} input nodes")
        eg = fp.eg
    else:
        eg = Tensor(np.ones((n, 1)))
    h = x
    last = len(fp.weights) - 1
    for i, (w, b) in enumerate(zip(fp.weights, fp.biases)):
        h = gcn_layer(h, adj, nomor_theta(eg, w), nomor_bias(eg, b))
        if i < last:
            h = nk.relu(h)
    return h


def model_forward(p: ModelParams, x) -> np.ndarray:
    """Predict N×(horizon*out_features) from N×(history*in_features).

    A leading batch axis (B×N×C) is accepted and preserved.
    """
    return forward_tensors(p.arch, ForwardParams.of(p), nk.as_tensor(x)).data


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"FLDR"


def save_checkpoint(path, p: ModelParams) -> None:
    """Write a small header (magic, node count) followed by :meth:`ModelParams.to_bytes`."""
    n = p.num_nodes or 0
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", n))
        fh.write(p.to_bytes())


def load_checkpoint(path, arch: Architecture) -> ModelParams:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if head[:4] != _MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        (n,) = struct.unpack("<I", head[4:])
        return ModelParams.from_bytes(fh.read(), arch, max(n, 1))
