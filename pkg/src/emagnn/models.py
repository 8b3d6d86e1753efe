"""Forecaster families mapping an ``L x V`` window to the next ``V`` values.

* ``LSTM``        -- single-layer LSTM over the window, dense head.
* ``RGCN_ATT``    -- GCN step per timepoint feeding a node-wise GRU, temporal
                     attention over the hidden states, shared node head.
* ``ST_ATT_CHEB`` -- temporal and spatial attention, Chebyshev graph
                     convolution modulated by the spatial attention, temporal
                     convolution, mean pooling, shared node head.
* ``GRAPH_LEARN`` -- the RGCN_ATT backbone over an adjacency built from
                     trainable node embeddings.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import Graph, gcn_normalize, normalize

FAMILIES = ("LSTM", "RGCN_ATT", "ST_ATT_CHEB", "GRAPH_LEARN")
GRAPH_FAMILIES = FAMILIES[1:]


@dataclass
class ModelConfig:
    family: str = "RGCN_ATT"
    hidden: int = 32
    cheb_k: int = 3
    temporal_kernel: int = 3
    dropout: float = 0.3
    embed_dim: int = 8
    alpha: float = 3.0
    topk: int | None = None  # None -> round(0.2 * V)
    seq_len: int = 5

    def __post_init__(self):
        self.family = self.family.upper()
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}; choose from {', '.join(FAMILIES)}")
        if self.hidden <= 0:
            raise ValueError("hidden must be positive")
        if self.cheb_k < 1:
            raise ValueError("cheb_k must be >= 1")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ValueError("temporal_kernel must be a positive odd number")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")

    def resolved_topk(self, V: int) -> int:
        return self.topk if self.topk is not None else max(1, int(round(0.2 * V)))


class ForecasterModel:
    """Base class: an ordered parameter dict and a batched forward pass."""

    family = ""

    def __init__(self, config: ModelConfig, V: int, seed: int = 0):
        self.config = config
        self.V = V
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self.trained = False
        self._rng = np.random.default_rng(seed)

    def _param(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        p = ad.uniform_param(self._rng, shape, fan_in, name=name)
        self.params[name] = p
        return p

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def _check_input(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3 or X.shape[2] != self.V:
            raise ValueError(f"expected windows of shape (B, L, {self.V}), got {X.shape}")
        return X

    def forward(self, X: np.ndarray, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        raise NotImplementedError

    def predict(self, X: np.ndarray) -> np.ndarray:
        single = np.asarray(X).ndim == 2
        out = self.forward(X, training=False).data
        return out[0] if single else out

    def _dropout(self, x: Tensor, training: bool, rng) -> Tensor:
        return ad.dropout(x, self.config.dropout, training, rng)


# --------------------------------------------------------------------- LSTM
class LSTMForecaster(ForecasterModel):
    family = "LSTM"

    def __init__(self, config: ModelConfig, V: int, seed: int = 0):
        super().__init__(config, V, seed)
        H = config.hidden
        self._param("W_x", (V, 4 * H), V)
        self._param("W_h", (H, 4 * H), H)
        self._param("b", (4 * H,), H)
        self._param("W_out", (H, V), H)
        self._param("b_out", (V,), H)

    def forward(self, X, training=False, rng=None) -> Tensor:
        X = self._check_input(X)
        p = self.params
        H = self.config.hidden
        B, L, _ = X.shape
        gx = Tensor(X) @ p["W_x"] + p["b"]  # (B, L, 4H)
        h = c = None
        for t in range(L):
            gates = gx[:, t, :] if h is None else gx[:, t, :] + h @ p["W_h"]
            i = gates[:, :H].sigmoid()
            f = gates[:, H:2 * H].sigmoid()
            g = gates[:, 2 * H:3 * H].tanh()
            o = gates[:, 3 * H:].sigmoid()
            c = i * g if c is None else f * c + i * g
            h = o * c.tanh()
        h = self._dropout(h, training, rng)
        return h @ p["W_out"] + p["b_out"]


# ---------------------------------------------------- recurrent GCN backbone
class RecurrentGCNForecaster(ForecasterModel):
    """GCN -> node-wise GRU -> temporal attention -> shared node head."""

    family = "RGCN_ATT"

    def __init__(self, config: ModelConfig, V: int, graph: Graph | np.ndarray | None = None, seed: int = 0):
        super().__init__(config, V, seed)
        self._init_backbone()
        if self.family == "RGCN_ATT":
            if graph is None:
                raise ValueError("RGCN_ATT needs a graph")
            self.set_graph(graph)

    def _init_backbone(self) -> None:
        H = self.config.hidden
        self._param("W_g", (1, H), 1)
        self._param("b_g", (H,), 1)
        self._param("W_i", (H, 3 * H), H)
        self._param("b_i", (3 * H,), H)
        self._param("W_hh", (H, 3 * H), H)
        self._param("b_hh", (3 * H,), H)
        self._param("att", (H, 1), H)
        self._param("W_out", (H, 1), H)
        self._param("b_out", (1,), H)

    def set_graph(self, graph: Graph | np.ndarray) -> None:
        weights = graph.weights if isinstance(graph, Graph) else np.asarray(graph, dtype=np.float64)
        if weights.shape != (self.V, self.V):
            raise ValueError(f"graph must be {self.V} x {self.V}")
        self.graph_weights = weights.copy()
        self.adjacency = normalize(weights).adjacency

    def buffers(self) -> dict[str, np.ndarray]:
        return {"graph_weights": self.graph_weights}

    def attention_weights(self, X: np.ndarray) -> np.ndarray:
        """Temporal attention of the last forward pass, shape ``(B, V, L)``."""
        self.forward(X, training=False)
        return self._last_attention

    def _backbone(self, X: np.ndarray, adjacency, training: bool, rng) -> Tensor:
        p = self.params
        H = self.config.hidden
        B, L, V = X.shape
        # time-major throughout: (L, B, V, ...)
        xt = np.ascontiguousarray(X.transpose(1, 0, 2))
        # aggregated neighbourhood signal per node and timepoint
        if isinstance(adjacency, Tensor):
            s = Tensor(xt) @ adjacency.T
        else:
            s = Tensor(xt @ adjacency.T)
        g = (s.reshape(L, B, V, 1) * p["W_g"] + p["b_g"]).relu()  # (L, B, V, H)
        g = self._dropout(g, training, rng)
        gi = (g @ p["W_i"] + p["b_i"]).reshape(L, B * V, 3 * H)
        hs = ad.gru_sequence(gi, p["W_hh"], p["b_hh"]).reshape(L, B, V, H)
        scores = (hs @ p["att"]).reshape(L, B, V)
        attn = ad.softmax(scores, axis=0)
        self._last_attention = attn.data.transpose(1, 2, 0)
        context = (attn.reshape(L, B, V, 1) * hs).sum(axis=0)  # (B, V, H)
        context = self._dropout(context, training, rng)
        return (context @ p["W_out"]).reshape(B, V) + p["b_out"]

    def forward(self, X, training=False, rng=None) -> Tensor:
        X = self._check_input(X)
        return self._backbone(X, self.adjacency, training, rng)


# ------------------------------------------------------- spatio-temporal cheb
class SpatioTemporalChebForecaster(ForecasterModel):
    family = "ST_ATT_CHEB"

    def __init__(self, config: ModelConfig, V: int, graph: Graph | np.ndarray | None = None, seed: int = 0):
        super().__init__(config, V, seed)
        if graph is None:
            raise ValueError("ST_ATT_CHEB needs a graph")
        H, L, K, k = config.hidden, config.seq_len, config.cheb_k, config.temporal_kernel
        # temporal attention
        self._param("t_u", (V, 1), V)
        self._param("t_r", (V, 1), V)
        self._param("t_bias", (L, L), L)
        self._param("t_mix", (L, L), L)
        # spatial attention
        self._param("s_p", (L, 1), L)
        self._param("s_q", (L, 1), L)
        self._param("s_bias", (V, V), V)
        self._param("s_mix", (V, V), V)
        # graph and temporal convolution
        self._param("W_cheb", (K, H), K)
        self._param("b_cheb", (H,), K)
        self._param("W_time", (k * H, H), k * H)
        self._param("b_time", (H,), k * H)
        self._param("W_out", (H, 1), H)
        self._param("b_out", (1,), H)
        self.set_graph(graph)

    def set_graph(self, graph: Graph | np.ndarray) -> None:
        weights = graph.weights if isinstance(graph, Graph) else np.asarray(graph, dtype=np.float64)
        if weights.shape != (self.V, self.V):
            raise ValueError(f"graph must be {self.V} x {self.V}")
        self.graph_weights = weights.copy()
        self.supports = np.stack(normalize(weights, chebyshev_order=self.config.cheb_k).chebyshev)

    def buffers(self) -> dict[str, np.ndarray]:
        return {"graph_weights": self.graph_weights}

    def attention_maps(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(temporal ``B x L x L``, spatial ``B x V x V``) maps of a forward pass."""
        self.forward(X, training=False)
        return self._last_temporal, self._last_spatial

    def forward(self, X, training=False, rng=None) -> Tensor:
        X = self._check_input(X)
        p = self.params
        cfg = self.config
        B, L, V = X.shape
        if L != cfg.seq_len:
            raise ValueError(f"model was built for seq_len={cfg.seq_len}, got windows of length {L}")
        H, K, k = cfg.hidden, cfg.cheb_k, cfg.temporal_kernel
        x = Tensor(X)

        u = x @ p["t_u"]  # (B, L, 1)
        r = x @ p["t_r"]
        temporal = ad.softmax(p["t_mix"] @ (u @ r.swapaxes(1, 2) + p["t_bias"]).sigmoid(), axis=-1)
        xt = temporal @ x  # (B, L, V)
        nodes = xt.swapaxes(1, 2)  # (B, V, L)

        a = nodes @ p["s_p"]  # (B, V, 1)
        b = nodes @ p["s_q"]
        spatial = ad.softmax(p["s_mix"] @ (a @ b.swapaxes(1, 2) + p["s_bias"]).sigmoid(), axis=-1)
        self._last_temporal, self._last_spatial = temporal.data, spatial.data

        # Chebyshev terms modulated by spatial attention: (B, K, V, V) @ (B, 1, V, L)
        modulated = spatial.reshape(B, 1, V, V) * Tensor(self.supports[None])
        conv = modulated @ nodes.reshape(B, 1, V, L)  # (B, K, V, L)
        conv = conv.transpose(0, 2, 3, 1)  # (B, V, L, K)
        g = (conv @ p["W_cheb"] + p["b_cheb"]).relu()  # (B, V, L, H)
        g = self._dropout(g, training, rng)

        pad = k // 2
        if pad:
            zeros = Tensor(np.zeros((B, V, pad, H)))
            g = ad.concat([zeros, g, zeros], axis=2)
        taps = ad.concat([g[:, :, j:j + L, :] for j in range(k)], axis=-1)  # (B, V, L, kH)
        y = (taps @ p["W_time"] + p["b_time"]).relu()
        pooled = y.mean(axis=2)  # (B, V, H)
        pooled = self._dropout(pooled, training, rng)
        return (pooled @ p["W_out"]).reshape(B, V) + p["b_out"]


# ------------------------------------------------------------ graph learning
def learn_graph(E1: Tensor, E2: Tensor, theta1: Tensor, theta2: Tensor, alpha: float, topk: int) -> Tensor:
    """Uni-directional adjacency from node embeddings, top-k kept per row.

    ``relu(tanh(alpha * (M1 M2^T - M2 M1^T)))`` with ``M = tanh(alpha * E theta)``;
    the top-k selection is a constant mask, so gradients flow through the
    retained entries only.
    """
    V = E1.shape[0]
    if topk > V:
        raise ValueError(f"topk={topk} exceeds the number of nodes {V}")
    m1 = (ad.ensure_tensor(E1) @ theta1 * alpha).tanh()
    m2 = (ad.ensure_tensor(E2) @ theta2 * alpha).tanh()
    a = ((m1 @ m2.T - m2 @ m1.T) * alpha).tanh().relu()
    order = np.argsort(-a.data, axis=1, kind="stable")[:, :topk]
    mask = np.zeros((V, V))
    np.put_along_axis(mask, order, 1.0, axis=1)
    return a * Tensor(mask)


def normalize_tensor(adjacency: Tensor) -> Tensor:
    """Differentiable ``D^-1/2 (A + I) D^-1/2`` with row degrees."""
    V = adjacency.shape[0]
    a = adjacency + np.eye(V)
    dinv = a.sum(axis=1) ** -0.5
    return a * dinv.reshape(V, 1) * dinv.reshape(1, V)


def spectral_embeddings(weights: np.ndarray, dim: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Rank-``dim`` factorisation ``W ~ E1 E2^T`` from the leading eigenpairs."""
    sym = (weights + weights.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    idx = np.argsort(-np.abs(vals), kind="stable")[:dim]
    vals, vecs = vals[idx], vecs[:, idx]
    if len(idx) < dim:
        pad = np.zeros((weights.shape[0], dim - len(idx)))
        vecs = np.concatenate([vecs, pad], axis=1)
        vals = np.concatenate([vals, np.zeros(dim - len(idx))])
    root = np.sqrt(np.abs(vals))
    e1 = vecs * root
    e2 = vecs * root * np.where(vals < 0, -1.0, 1.0)
    # break the E1 == E2 symmetry, which would make the learned graph vanish
    jitter = 0.1 / np.sqrt(dim)
    return e1 + rng.uniform(-jitter, jitter, e1.shape), e2 + rng.uniform(-jitter, jitter, e2.shape)


class GraphLearningForecaster(RecurrentGCNForecaster):
    family = "GRAPH_LEARN"

    def __init__(self, config: ModelConfig, V: int, graph: Graph | np.ndarray | None = None, seed: int = 0):
        super().__init__(config, V, None, seed)
        d = config.embed_dim
        if graph is not None:
            weights = graph.weights if isinstance(graph, Graph) else np.asarray(graph, dtype=np.float64)
            e1, e2 = spectral_embeddings(weights, d, self._rng)
            self.params["E1"] = Tensor(e1, requires_grad=True, name="E1")
            self.params["E2"] = Tensor(e2, requires_grad=True, name="E2")
            self.init_metric = graph.metric if isinstance(graph, Graph) else "CUSTOM"
        else:
            self._param("E1", (V, d), d)
            self._param("E2", (V, d), d)
            self.init_metric = None
        self._param("theta1", (d, d), d)
        self._param("theta2", (d, d), d)
        self.topk = config.resolved_topk(V)
        if self.topk > V:
            raise ValueError(f"topk={self.topk} exceeds the number of nodes {V}")

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def learned_adjacency(self) -> Tensor:
        p = self.params
        return learn_graph(p["E1"], p["E2"], p["theta1"], p["theta2"], self.config.alpha, self.topk)

    def forward(self, X, training=False, rng=None) -> Tensor:
        X = self._check_input(X)
        adjacency = normalize_tensor(self.learned_adjacency())
        return self._backbone(X, adjacency, training, rng)


def extract_learned_graph(model: GraphLearningForecaster, gdt: float = 1.0) -> Graph:
    """Final learned adjacency (post top-k), symmetrized as ``(A + A^T) / 2``."""
    if not isinstance(model, GraphLearningForecaster):
        raise TypeError("only GRAPH_LEARN models carry a learned graph")
    a = model.learned_adjacency().data
    sym = (a + a.T) / 2.0
    np.fill_diagonal(sym, 0.0)
    meta = {"init_metric": model.init_metric, "topk": model.topk, "trained": model.trained}
    if not model.trained:
        warnings.warn("exporting the graph of an untrained GRAPH_LEARN model", stacklevel=2)
        meta["warning"] = "untrained"
    return Graph(sym, "LEARNED", gdt, seed=model.seed, meta=meta)


# ------------------------------------------------------------------ factory
def build_model(config: ModelConfig, V: int, graph: Graph | np.ndarray | None = None, seed: int = 0) -> ForecasterModel:
    family = config.family
    if family == "LSTM":
        return LSTMForecaster(config, V, seed)
    if family == "RGCN_ATT":
        return RecurrentGCNForecaster(config, V, graph, seed)
    if family == "ST_ATT_CHEB":
        return SpatioTemporalChebForecaster(config, V, graph, seed)
    return GraphLearningForecaster(config, V, graph, seed)


# -------------------------------------------------------------- checkpoints
def save_checkpoint(model: ForecasterModel, path) -> None:
    """JSON manifest plus a flat little-endian float64 blob in manifest order."""
    path = Path(path)
    arrays = [(name, p.data) for name, p in model.params.items()]
    arrays += [(f"buffer:{name}", arr) for name, arr in model.buffers().items()]
    manifest = {
        "config": asdict(model.config),
        "V": model.V,
        "seed": model.seed,
        "trained": model.trained,
        "init_metric": getattr(model, "init_metric", None),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2))
    blob = np.concatenate([a.reshape(-1) for _, a in arrays]) if arrays else np.zeros(0)
    path.with_suffix(".bin").write_bytes(blob.astype("<f8").tobytes())


def load_checkpoint(path) -> ForecasterModel:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    arrays, offset = {}, 0
    for spec in manifest["tensors"]:
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arrays[spec["name"]] = blob[offset:offset + n].reshape(spec["shape"]).copy()
        offset += n
    if offset != blob.size:
        raise ValueError(f"{path}: parameter blob has {blob.size} values, manifest expects {offset}")
    config = ModelConfig(**manifest["config"])
    V = manifest["V"]
    graph = arrays.get("buffer:graph_weights")
    model = build_model(config, V, graph if graph is not None else None, manifest["seed"])
    for name, p in model.params.items():
        if name not in arrays or arrays[name].shape != p.shape:
            raise ValueError(f"{path}: missing or mis-shaped tensor {name!r}")
        p.data = arrays[name]
    model.trained = manifest.get("trained", False)
    if hasattr(model, "init_metric"):
        model.init_metric = manifest.get("init_metric")
    return model
