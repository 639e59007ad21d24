"""The three weak learners: GIN-Virtual, GIN-Virtual with a Bayesian readout,
and GIN-Virtual with a DiffPool coarsening branch.

All models are pure functions of a :class:`ModelParams` bundle and a
:class:`GraphBatch`.  Weight matrices are stored ``[in, out]`` so a linear
layer is ``x @ W + b``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .chem import ATOM_VOCAB, BOND_VOCAB, MolGraph, feature_arrays
from .errors import EmptyBatch, EmptyGraph, ShapeMismatch
from .numerics import BatchNormState, Tensor

VARIANTS = ("gin_virtual", "gin_virtual_bnn", "gin_virtual_diffpool")


# --- configuration ---------------------------------------------------------


@dataclass
class BnnConfig:
    hidden: list[int] = field(default_factory=lambda: [64, 64, 32])
    prior_sigma: float = 1.0
    kl_weight: float = 0.1
    # "mean" divides the summed KL by the number of Bayesian weight entries.
    kl_reduction: str = "mean"


@dataclass
class DiffPoolConfig:
    num_supernodes: int = 5
    aux_losses: bool = False
    aux_weight: float = 1.0


@dataclass
class ModelConfig:
    variant: str = "gin_virtual"
    latent_dim: int = 600
    num_layers: int = 5
    dropout: float = 0.0
    clamp_lo: float = 0.0
    clamp_hi: float = 50.0
    bnn: BnnConfig = field(default_factory=BnnConfig)
    diffpool: DiffPoolConfig = field(default_factory=DiffPoolConfig)

    def __post_init__(self):
        if isinstance(self.bnn, dict):
            self.bnn = BnnConfig(**self.bnn)
        if isinstance(self.diffpool, dict):
            self.diffpool = DiffPoolConfig(**self.diffpool)
        self.bnn.hidden = [int(w) for w in self.bnn.hidden]
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.latent_dim < 1 or self.num_layers < 1:
            raise ValueError("latent_dim and num_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not self.clamp_lo < self.clamp_hi:
            raise ValueError("clamp_lo must be < clamp_hi")
        if self.diffpool.num_supernodes < 1:
            raise ValueError("num_supernodes must be >= 1")
        if self.bnn.prior_sigma <= 0:
            raise ValueError("prior_sigma must be > 0")
        if self.bnn.kl_reduction not in ("mean", "sum"):
            raise ValueError("kl_reduction must be 'mean' or 'sum'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# --- batching ------------------------------------------------------------


@dataclass
class EncodedGraph:
    node_codes: np.ndarray  # [N, 5]
    edge_codes: np.ndarray  # [B, 2]
    bonds: np.ndarray  # [B, 2]

    @classmethod
    def from_mol(cls, g: MolGraph) -> "EncodedGraph":
        return cls(*feature_arrays(g))


@dataclass
class GraphBatch:
    node_codes: np.ndarray
    edge_codes: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    graph_ids: np.ndarray
    num_graphs: int

    @property
    def num_nodes(self) -> int:
        return self.node_codes.shape[0]

    @property
    def edge_graph_ids(self) -> np.ndarray:
        return self.graph_ids[self.edge_src]


def build_batch(graphs: Sequence[MolGraph | EncodedGraph]) -> GraphBatch:
    """Concatenate graphs with node offsets, emitting both directions of every bond."""
    if len(graphs) == 0:
        raise EmptyBatch("cannot batch zero graphs")
    nodes, edges, src, dst, gids = [], [], [], [], []
    offset = 0
    for gi, g in enumerate(graphs):
        enc = g if isinstance(g, EncodedGraph) else EncodedGraph.from_mol(g)
        n = enc.node_codes.shape[0]
        if n == 0:
            raise EmptyGraph(f"graph {gi} has no atoms")
        nodes.append(enc.node_codes)
        u, v = enc.bonds[:, 0] + offset, enc.bonds[:, 1] + offset
        src += [u, v]
        dst += [v, u]
        edges += [enc.edge_codes, enc.edge_codes]
        gids.append(np.full(n, gi, dtype=np.int64))
        offset += n
    return GraphBatch(
        node_codes=np.concatenate(nodes),
        edge_codes=np.concatenate(edges).reshape(-1, 2),
        edge_src=np.concatenate(src).astype(np.int64),
        edge_dst=np.concatenate(dst).astype(np.int64),
        graph_ids=np.concatenate(gids),
        num_graphs=len(graphs),
    )


# --- parameters ------------------------------------------------------------


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]
    bn: dict[str, BatchNormState]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def trainable(self) -> list[Tensor]:
        return list(self.tensors.values())

    def names(self) -> list[str]:
        return list(self.tensors)


def count_params(params: ModelParams | dict) -> int:
    """Total trainable scalars; batch-norm running statistics are not counted."""
    tensors = params.tensors if isinstance(params, ModelParams) else params
    return int(sum(t.size for t in tensors.values()))


class _Init:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.tensors: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}

    def put(self, name, data):
        self.tensors[name] = Tensor(data, requires_grad=True, name=name)

    def linear(self, name, fan_in, fan_out, bias=True):
        bound = 1.0 / math.sqrt(fan_in)
        self.put(f"{name}.w", self.rng.uniform(-bound, bound, (fan_in, fan_out)))
        if bias:
            self.put(f"{name}.b", self.rng.uniform(-bound, bound, fan_out))

    def embedding(self, name, rows, dim):
        self.put(name, self.rng.uniform(-0.1, 0.1, (rows, dim)))

    def norm(self, name, dim):
        self.put(f"{name}.weight", np.ones(dim))
        self.put(f"{name}.bias", np.zeros(dim))
        self.bn[name] = BatchNormState.fresh(dim)

    def mlp2(self, name, d, with_final_norm):
        self.linear(f"{name}.lin1", d, d)
        self.norm(f"{name}.bn1", d)
        self.linear(f"{name}.lin2", d, d)
        if with_final_norm:
            self.norm(f"{name}.bn2", d)


RHO_INIT = math.log(math.expm1(0.05))  # softplus(RHO_INIT) == 0.05


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    d, L = config.latent_dim, config.num_layers
    init = _Init(rng)
    for f, size in enumerate(ATOM_VOCAB):
        init.embedding(f"atom_emb.{f}", size, d)
    init.embedding("vn.init", 1, d)
    for layer in range(L):
        p = f"layer{layer}"
        for f, size in enumerate(BOND_VOCAB):
            init.embedding(f"{p}.bond_emb.{f}", size, d)
        init.put(f"{p}.eps", np.zeros(1))
        init.mlp2(f"{p}.mlp", d, with_final_norm=False)
        init.norm(f"{p}.bn", d)
        if layer < L - 1:
            init.mlp2(f"vn{layer}.mlp", d, with_final_norm=True)

    if config.variant == "gin_virtual":
        init.linear("readout", d, 1)
    elif config.variant == "gin_virtual_bnn":
        widths = [d, *config.bnn.hidden, 1]
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / math.sqrt(fi)
            name = f"readout.bayes{i}"
            init.put(f"{name}.w_mu", rng.uniform(-bound, bound, (fi, fo)))
            init.put(f"{name}.w_rho", np.full((fi, fo), RHO_INIT))
            init.put(f"{name}.b_mu", rng.uniform(-bound, bound, fo))
            init.put(f"{name}.b_rho", np.full(fo, RHO_INIT))
    else:
        k = config.diffpool.num_supernodes
        init.linear("pool.assign", d, k)
        init.put("pool.eps", np.zeros(1))
        init.linear("pool.mlp.lin1", d, d)
        init.linear("pool.mlp.lin2", d, d)
        init.linear("readout", 2 * d, 1)
    return ModelParams(config=config, tensors=init.tensors, bn=init.bn)


# --- building blocks ------------------------------------------------------


def _check_mode(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def _norm(params: ModelParams, name: str, x: Tensor, training: bool) -> Tensor:
    return nx.batch_norm(x, params[f"{name}.weight"], params[f"{name}.bias"], params.bn[name], training)


def _lin(params: ModelParams, name: str, x: Tensor) -> Tensor:
    return nx.linear(x, params[f"{name}.w"], params.tensors.get(f"{name}.b"))


def embed_atoms(params: ModelParams, batch: GraphBatch) -> Tensor:
    h = nx.embedding_lookup(params["atom_emb.0"], batch.node_codes[:, 0])
    for f in range(1, len(ATOM_VOCAB)):
        h = nx.add(h, nx.embedding_lookup(params[f"atom_emb.{f}"], batch.node_codes[:, f]))
    return h


def gin_layer(h: Tensor, batch: GraphBatch, params: ModelParams, layer: int, mode: str = "eval",
              rng: np.random.Generator | None = None) -> Tensor:
    """One GIN message-passing round with bond-feature messages.

    m_v = sum_{u->v} relu(h_u + bond_emb(e_uv)); out = MLP((1 + eps) h_v + m_v),
    then batch norm, relu (except on the final layer) and dropout.
    """
    training = _check_mode(mode)
    cfg = params.config
    if h.shape != (batch.num_nodes, cfg.latent_dim):
        raise ShapeMismatch(f"gin_layer input {h.shape}, expected ({batch.num_nodes}, {cfg.latent_dim})")
    p = f"layer{layer}"
    bond = nx.embedding_lookup(params[f"{p}.bond_emb.0"], batch.edge_codes[:, 0])
    bond = nx.add(bond, nx.embedding_lookup(params[f"{p}.bond_emb.1"], batch.edge_codes[:, 1]))
    msg = nx.relu(nx.add(nx.gather_rows(h, batch.edge_src), bond))
    agg = nx.segment_sum(msg, batch.edge_dst, batch.num_nodes)

    z = nx.add(nx.add(h, nx.mul_scalar(h, params[f"{p}.eps"])), agg)
    z = _lin(params, f"{p}.mlp.lin1", z)
    z = nx.relu(_norm(params, f"{p}.mlp.bn1", z, training))
    z = _lin(params, f"{p}.mlp.lin2", z)
    z = _norm(params, f"{p}.bn", z, training)
    if layer < cfg.num_layers - 1:
        z = nx.relu(z)
    return nx.dropout(z, cfg.dropout, rng, training)


def virtual_node_exchange(h: Tensor, vstate: Tensor, batch: GraphBatch, params: ModelParams, layer: int,
                          mode: str = "eval", rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Broadcast each graph's virtual state onto its nodes, then update the state.

    The update is skipped on the last layer, where no later layer could read it.
    """
    training = _check_mode(mode)
    if vstate.shape != (batch.num_graphs, params.config.latent_dim):
        raise ShapeMismatch(f"virtual state {vstate.shape} for {batch.num_graphs} graphs")
    h = nx.add(h, nx.gather_rows(vstate, batch.graph_ids))
    if layer >= params.config.num_layers - 1:
        return h, vstate

    p = f"vn{layer}.mlp"
    pooled = nx.add(nx.segment_sum(h, batch.graph_ids, batch.num_graphs), vstate)
    z = nx.relu(_norm(params, f"{p}.bn1", _lin(params, f"{p}.lin1", pooled), training))
    z = nx.relu(_norm(params, f"{p}.bn2", _lin(params, f"{p}.lin2", z), training))
    vstate = nx.add(vstate, nx.dropout(z, params.config.dropout, rng, training))
    return h, vstate


def trunk(params: ModelParams, batch: GraphBatch, mode: str = "eval", rng=None) -> Tensor:
    """Atom embedding followed by the virtual-node GIN stack; returns node states."""
    h = embed_atoms(params, batch)
    vstate = nx.gather_rows(params["vn.init"], np.zeros(batch.num_graphs, dtype=np.int64))
    for layer in range(params.config.num_layers):
        h, vstate = virtual_node_exchange(h, vstate, batch, params, layer, mode, rng)
        h = gin_layer(h, batch, params, layer, mode, rng)
    return h


def _clamp_out(params: ModelParams, out: Tensor) -> Tensor:
    cfg = params.config
    return nx.clamp(nx.reshape(out, (out.shape[0],)), cfg.clamp_lo, cfg.clamp_hi)


def _expect_variant(params: ModelParams, variant: str) -> None:
    if params.config.variant != variant:
        raise ValueError(f"parameters are for {params.config.variant!r}, not {variant!r}")


# --- GIN-Virtual ---------------------------------------------------------


def forward_gin_virtual(params: ModelParams, batch: GraphBatch, mode: str = "eval", rng=None) -> Tensor:
    _expect_variant(params, "gin_virtual")
    h = trunk(params, batch, mode, rng)
    g = nx.segment_sum(h, batch.graph_ids, batch.num_graphs)
    return _clamp_out(params, _lin(params, "readout", g))


# --- Bayesian readout ------------------------------------------------------


def bayes_linear(x: Tensor, w_mu: Tensor, w_rho: Tensor, b_mu: Tensor, b_rho: Tensor, mode: str = "eval",
                 rng: np.random.Generator | None = None) -> Tensor:
    """Bayes-by-backprop linear layer.

    Train mode samples ``W = mu + softplus(rho) * eps`` with fresh standard
    normal noise on every call; eval mode uses the posterior means.
    """
    if not _check_mode(mode):
        return nx.linear(x, w_mu, b_mu)
    if rng is None:
        raise ValueError("bayes_linear in train mode needs an rng")
    w = nx.add(w_mu, nx.mul(nx.softplus(w_rho), Tensor(rng.standard_normal(w_mu.shape))))
    b = nx.add(b_mu, nx.mul(nx.softplus(b_rho), Tensor(rng.standard_normal(b_mu.shape))))
    return nx.linear(x, w, b)


def bayes_kl(params: ModelParams) -> Tensor:
    """Summed KL of every Bayesian readout weight against the zero-mean prior."""
    prior = params.config.bnn.prior_sigma
    total = None
    for i in range(len(params.config.bnn.hidden) + 1):
        p = f"readout.bayes{i}"
        for kind in ("w", "b"):
            kl = nx.kl_gaussian(params[f"{p}.{kind}_mu"], nx.softplus(params[f"{p}.{kind}_rho"]), prior)
            total = kl if total is None else nx.add(total, kl)
    return total


def bayes_weight_count(params: ModelParams) -> int:
    return sum(t.size for name, t in params.tensors.items() if name.startswith("readout.bayes") and "_mu" in name)


def forward_gin_virtual_bnn(params: ModelParams, batch: GraphBatch, mode: str = "eval",
                            rng=None) -> tuple[Tensor, Tensor]:
    _expect_variant(params, "gin_virtual_bnn")
    h = trunk(params, batch, mode, rng)
    z = nx.segment_sum(h, batch.graph_ids, batch.num_graphs)
    n_layers = len(params.config.bnn.hidden) + 1
    for i in range(n_layers):
        p = f"readout.bayes{i}"
        z = bayes_linear(z, params[f"{p}.w_mu"], params[f"{p}.w_rho"], params[f"{p}.b_mu"], params[f"{p}.b_rho"],
                         mode, rng)
        if i < n_layers - 1:
            z = nx.relu(z)
    return _clamp_out(params, z), bayes_kl(params)


# --- DiffPool --------------------------------------------------------------


@dataclass
class Coarsened:
    h: Tensor  # [G*K, d] supernode features
    adj: Tensor  # [G, K, K] coarsened adjacency
    assign: Tensor  # [N, K]; rows belonging to graph g form S_g


def diffpool_coarsen(h: Tensor, batch: GraphBatch, params: ModelParams) -> Coarsened:
    """Soft-assign nodes of each graph to K supernodes: S = softmax(h W), S^T h, S^T A S."""
    k = params.config.diffpool.num_supernodes
    d = h.shape[1]
    s = nx.softmax_rows(_lin(params, "pool.assign", h))
    hc = nx.segment_outer(s, h, batch.graph_ids, batch.num_graphs)
    # A is symmetric with both bond directions present, so summing
    # outer(S_u, S_v) over directed edges gives S^T A S.
    ac = nx.segment_outer(nx.gather_rows(s, batch.edge_src), nx.gather_rows(s, batch.edge_dst),
                          batch.edge_graph_ids, batch.num_graphs)
    return Coarsened(h=nx.reshape(hc, (batch.num_graphs * k, d)), adj=ac, assign=s)


def _diffpool_aux(c: Coarsened, batch: GraphBatch) -> Tensor:
    """Link-prediction (mean squared ||A - S S^T||) plus mean assignment entropy."""
    src, dst, adj = [], [], []
    bonded = set(zip(batch.edge_src.tolist(), batch.edge_dst.tolist()))
    for g in range(batch.num_graphs):
        nodes = np.flatnonzero(batch.graph_ids == g)
        for u in nodes:
            for v in nodes:
                src.append(u)
                dst.append(v)
                adj.append(1.0 if (u, v) in bonded else 0.0)
    dot = nx.sum_rows(nx.mul(nx.gather_rows(c.assign, src), nx.gather_rows(c.assign, dst)))
    diff = nx.sub(dot, Tensor(np.asarray(adj)))
    link = nx.scale(nx.sum(nx.mul(diff, diff)), 1.0 / len(adj))
    s = c.assign
    logs = nx.log(nx.add(s, Tensor(np.full(s.shape, 1e-12))))
    entropy = nx.scale(nx.sum(nx.mul(s, logs)), -1.0 / s.shape[0])
    return nx.add(link, entropy)


def _forward_diffpool(params: ModelParams, batch: GraphBatch, mode: str, rng) -> tuple[Tensor, Tensor | None]:
    _expect_variant(params, "gin_virtual_diffpool")
    k = params.config.diffpool.num_supernodes
    h = trunk(params, batch, mode, rng)
    c = diffpool_coarsen(h, batch, params)

    d = h.shape[1]
    hc3 = nx.reshape(c.h, (batch.num_graphs, k, d))
    agg = nx.reshape(nx.bmm(c.adj, hc3), (batch.num_graphs * k, d))
    z = nx.add(nx.add(c.h, nx.mul_scalar(c.h, params["pool.eps"])), agg)
    z = _lin(params, "pool.mlp.lin2", nx.relu(_lin(params, "pool.mlp.lin1", z)))

    e1 = nx.segment_sum(h, batch.graph_ids, batch.num_graphs)
    e2 = nx.segment_sum(z, np.repeat(np.arange(batch.num_graphs), k), batch.num_graphs)
    pred = _clamp_out(params, _lin(params, "readout", nx.concat_cols(e1, e2)))
    aux = _diffpool_aux(c, batch) if params.config.diffpool.aux_losses else None
    return pred, aux


def forward_gin_virtual_diffpool(params: ModelParams, batch: GraphBatch, mode: str = "eval", rng=None) -> Tensor:
    return _forward_diffpool(params, batch, mode, rng)[0]


# --- dispatch ----------------------------------------------------------------


@dataclass
class ForwardOutput:
    pred: Tensor
    kl: Tensor | None = None
    aux: Tensor | None = None


def forward(params: ModelParams, batch: GraphBatch, mode: str = "eval", rng=None) -> ForwardOutput:
    variant = params.config.variant
    if variant == "gin_virtual":
        return ForwardOutput(forward_gin_virtual(params, batch, mode, rng))
    if variant == "gin_virtual_bnn":
        pred, kl = forward_gin_virtual_bnn(params, batch, mode, rng)
        return ForwardOutput(pred, kl=kl)
    pred, aux = _forward_diffpool(params, batch, mode, rng)
    return ForwardOutput(pred, aux=aux)


def predict_batch(params: ModelParams, batch: GraphBatch) -> np.ndarray:
    """Eval-mode predictions as a plain array, without touching the tape."""
    with nx.no_grad():
        return forward(params, batch, "eval").pred.data.copy()
