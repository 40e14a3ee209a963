"""Model families: local message passing, token attention and hybrids.

Processor pipeline for the hybrid families::

    encode -> pre MPNN blocks -> [contact residual] -> global attention
           -> post MPNN blocks -> acceleration decoder

Pure-attention families skip the MPNN stages and mesh edges entirely; MGN
is the pure message-passing stack. The decoder outputs *normalized*
accelerations for all nodes; integration pins RIGID rows downstream.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import engine
from .contact import ContactSet, contact_residual
from .engine import Tensor
from .errors import ConfigError, NumericalError
from .mesh import MeshGraph, NodeState, NormStats
from .nn import MLP, LayerNorm, ParamStore
from .util import config_hash

FAMILIES = (
    "MGN",
    "Transolver",
    "MeshTransolver",
    "MeshTransolver+Contact",
    "GeoTransolver",
    "GeoFLARE",
    "MeshGeoTransolver",
    "MeshGeoFLARE",
)

# family -> (l_pre, l_attn, l_post, d_node, kernel, token_stage, plusplus, contact_k)
_FAMILY_TABLE = {
    "MGN": (6, 0, 0, 7, None, None, False, 0),
    "Transolver": (0, 6, 0, 5, "physics", "dense", False, 0),
    "MeshTransolver": (1, 6, 2, 11, "physics", "dense", True, 0),
    "MeshTransolver+Contact": (1, 6, 2, 11, "physics", "dense", True, 32),
    "GeoTransolver": (0, 4, 0, 5, "geo", "dense", False, 0),
    "GeoFLARE": (0, 4, 0, 5, "geo", "flare", False, 0),
    "MeshGeoTransolver": (1, 4, 2, 11, "geo", "dense", False, 16),
    "MeshGeoFLARE": (1, 4, 2, 11, "geo", "flare", False, 16),
}

_PURE_ATTENTION = ("Transolver", "GeoTransolver", "GeoFLARE")
_HYBRID = ("MeshTransolver", "MeshTransolver+Contact", "MeshGeoTransolver", "MeshGeoFLARE")


@dataclass
class ModelConfig:
    family: str
    dim: int = 2
    d_h: int = 128
    m_tokens: int = 128
    l_pre: int = 0
    l_attn: int = 0
    l_post: int = 0
    d_node: int = 0
    heads: int = 4
    ffn_mult: int = 2
    routes: int = 0  # 0 -> m_tokens // 4 for FLARE stages
    geo_embed_dim: int = 16
    contact_enabled: bool = False
    contact_k: int = 0
    contact_radius: float = 0.0  # 0 -> 3x median mesh edge length at rollout time
    contact_alpha_init: float = 1e-3
    plusplus: bool = False
    mpnn_activation: str = "relu"
    attn_activation: str = "gelu"

    @classmethod
    def for_family(cls, family: str, **overrides) -> "ModelConfig":
        if family not in _FAMILY_TABLE:
            raise ConfigError(f"unknown family {family!r}; choose one of {FAMILIES}")
        l_pre, l_attn, l_post, d_node, kernel, stage, plusplus, contact_k = _FAMILY_TABLE[family]
        cfg = cls(
            family=family,
            l_pre=l_pre,
            l_attn=l_attn,
            l_post=l_post,
            d_node=d_node,
            plusplus=plusplus,
            contact_enabled=contact_k > 0,
            contact_k=contact_k,
        )
        for key, value in overrides.items():
            if not hasattr(cfg, key):
                raise ConfigError(f"unknown config field {key!r}")
            setattr(cfg, key, value)
        cfg.validate()
        return cfg

    @property
    def kernel(self) -> str | None:
        return _FAMILY_TABLE[self.family][4]

    @property
    def token_stage(self) -> str | None:
        return _FAMILY_TABLE[self.family][5]

    @property
    def uses_mesh(self) -> bool:
        return self.l_pre > 0 or self.l_post > 0

    @property
    def effective_routes(self) -> int:
        return self.routes if self.routes > 0 else max(1, self.m_tokens // 4)

    def validate(self):
        if self.family not in _FAMILY_TABLE:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.family in _HYBRID and (self.l_pre < 1 or self.l_post < 1):
            raise ConfigError(f"{self.family}: hybrid families need l_pre >= 1 and l_post >= 1")
        if self.family in _PURE_ATTENTION and (self.l_pre != 0 or self.l_post != 0):
            raise ConfigError(f"{self.family}: pure-attention families need l_pre = l_post = 0")
        if self.family == "MGN" and self.l_attn != 0:
            raise ConfigError("MGN has no attention stage")
        if self.l_attn > 0 and self.m_tokens < 1:
            raise ConfigError("m_tokens must be >= 1")
        if self.l_attn > 0 and self.d_h % self.heads != 0:
            raise ConfigError(f"d_h={self.d_h} not divisible by heads={self.heads}")
        if self.token_stage == "flare" and self.effective_routes < 1:
            raise ConfigError("flare stage needs routes >= 1")
        if self.d_node < self.dim:
            raise ConfigError("d_node must cover at least the velocity components")
        if self.contact_enabled and self.contact_k < 1:
            raise ConfigError("contact-enabled config needs contact_k >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def hash(self) -> str:
        return config_hash(self.to_dict())


STAGE_TAGS = ("H0", "H1", "H1~", "H2", "H3")


@dataclass
class LatentField:
    """N x d_h latent nodal matrix with its pipeline stage tag."""

    tensor: Tensor
    stage: str

    def validate(self, d_h: int):
        if self.stage not in STAGE_TAGS:
            raise ConfigError(f"unknown latent stage {self.stage!r}")
        if self.tensor.values.ndim != 2 or self.tensor.values.shape[1] != d_h:
            raise ConfigError(f"latent at {self.stage} has shape {self.tensor.values.shape}, want (*, {d_h})")
        if not np.isfinite(self.tensor.values).all():
            raise NumericalError(f"non-finite latent entries after stage {self.stage}")


class MPNNBlock:
    """Edge update then node update, both residual with layer norm."""

    def __init__(self, store: ParamStore, name: str, d: int, activation: str):
        self.edge_mlp = MLP(store, f"{name}.edge_mlp", [3 * d, d, d], activation)
        self.edge_ln = LayerNorm(store, f"{name}.edge_ln", d)
        self.node_mlp = MLP(store, f"{name}.node_mlp", [2 * d, d, d], activation)
        self.node_ln = LayerNorm(store, f"{name}.node_ln", d)

    def __call__(self, h: Tensor, e: Tensor, graph: MeshGraph) -> tuple[Tensor, Tensor]:
        if h.values.shape[0] != graph.node_count:
            raise ConfigError("MPNN block: latent row count does not match the graph")
        hi = engine.gather_rows(h, graph.receivers)
        hj = engine.gather_rows(h, graph.neighbors)
        messages = engine.add(e, self.edge_ln(self.edge_mlp(engine.concat([hi, hj, e], axis=1))))
        agg = engine.scatter_add_rows(messages, graph.receivers, graph.node_count)
        h_out = engine.add(h, self.node_ln(self.node_mlp(engine.concat([h, agg], axis=1))))
        return h_out, messages


class DenseTokenStage:
    """Multi-head self-attention plus feedforward over the M tokens."""

    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig):
        d = cfg.d_h
        self.heads = cfg.heads
        self.d_head = d // cfg.heads
        self.scale = 1.0 / math.sqrt(self.d_head)
        self.wq = [store.param(f"{name}.head{k}.wq", (d, self.d_head), fan_in=d) for k in range(cfg.heads)]
        self.wk = [store.param(f"{name}.head{k}.wk", (d, self.d_head), fan_in=d) for k in range(cfg.heads)]
        self.wv = [store.param(f"{name}.head{k}.wv", (d, self.d_head), fan_in=d) for k in range(cfg.heads)]
        self.wo = store.param(f"{name}.wo", (d, d), fan_in=d)
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)
        self.ffn = MLP(store, f"{name}.ffn", [d, cfg.ffn_mult * d, d], cfg.attn_activation)

    def _mhsa(self, t: Tensor) -> Tensor:
        outs = []
        for k in range(self.heads):
            q = engine.matmul(t, self.wq[k])
            key = engine.matmul(t, self.wk[k])
            v = engine.matmul(t, self.wv[k])
            attn = engine.row_softmax(engine.scale(engine.matmul(q, key, transpose_b=True), self.scale))
            outs.append(engine.matmul(attn, v))
        return engine.matmul(engine.concat(outs, axis=1), self.wo)

    def __call__(self, t: Tensor) -> Tensor:
        t = engine.add(t, self._mhsa(self.ln1(t)))
        return engine.add(t, self.ffn(self.ln2(t)))


class FlareTokenStage:
    """Low-rank routed token interaction plus feedforward.

    Tokens are softmax-pooled into r latent routes, transformed, and
    broadcast back; same input/output shape as the dense stage.
    """

    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig):
        d = cfg.d_h
        self.route_keys = store.param(f"{name}.route_keys", (cfg.effective_routes, d), fan_in=d)
        self.route_mlp = MLP(store, f"{name}.route_mlp", [d, d, d], cfg.attn_activation)
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)
        self.ffn = MLP(store, f"{name}.ffn", [d, cfg.ffn_mult * d, d], cfg.attn_activation)

    def _route(self, t: Tensor) -> Tensor:
        weights = engine.row_softmax(engine.matmul(t, self.route_keys, transpose_b=True))
        pooled = engine.matmul(weights, t, transpose_a=True)
        return engine.matmul(weights, self.route_mlp(pooled))

    def __call__(self, t: Tensor) -> Tensor:
        t = engine.add(t, self._route(self.ln1(t)))
        return engine.add(t, self.ffn(self.ln2(t)))


class AttentionBlock:
    """Slice nodes into M tokens, transform tokens, deslice back, residual.

    Geometry-aware blocks concatenate a learned position embedding into the
    slice-logit input only; token processing is unchanged. The ++ variant
    multiplies slice logits by a learnable per-slice temperature.
    """

    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig):
        d = cfg.d_h
        slice_in = d + (cfg.geo_embed_dim if cfg.kernel == "geo" else 0)
        self.keys = store.param(f"{name}.slice_keys", (cfg.m_tokens, slice_in), fan_in=slice_in)
        self.log_temp = (
            store.param(f"{name}.log_temp", (1, cfg.m_tokens), init="zeros") if cfg.plusplus else None
        )
        if cfg.token_stage == "flare":
            self.stage = FlareTokenStage(store, f"{name}.flare", cfg)
        else:
            self.stage = DenseTokenStage(store, f"{name}.tokens", cfg)
        self.geo = cfg.kernel == "geo"

    def slice_weights(self, h: Tensor, geo_emb: Tensor | None) -> Tensor:
        z = engine.concat([h, geo_emb], axis=1) if self.geo else h
        logits = engine.matmul(z, self.keys, transpose_b=True)
        if self.log_temp is not None:
            logits = engine.mul(logits, engine.exp(self.log_temp))
        return engine.row_softmax(logits)

    def __call__(self, h: Tensor, geo_emb: Tensor | None) -> tuple[Tensor, Tensor]:
        if self.geo and geo_emb is None:
            raise ConfigError("geometry-aware block needs position embeddings")
        w = self.slice_weights(h, geo_emb)
        tokens = engine.matmul(w, h, transpose_a=True)
        transformed = self.stage(tokens)
        out = engine.add(h, engine.matmul(w, transformed))
        return out, w


def normalized_reference_positions(graph: MeshGraph) -> np.ndarray:
    """Min-max normalize reference coordinates per axis (degenerate axes -> 0.5)."""
    ref = graph.reference_positions
    lo = ref.min(axis=0)
    hi = ref.max(axis=0)
    span = hi - lo
    safe = np.where(span > 0.0, span, 1.0)
    out = (ref - lo) / safe
    return np.where(span > 0.0, out, 0.5)


def edge_feature_tensors(graph: MeshGraph, x: Tensor) -> Tensor:
    """Differentiable twin of mesh.build_edge_features."""
    i = graph.receivers
    j = graph.neighbors
    dx = engine.sub(engine.gather_rows(x, j), engine.gather_rows(x, i))
    u = engine.sub(x, engine.constant(graph.reference_positions))
    du = engine.sub(engine.gather_rows(u, j), engine.gather_rows(u, i))
    return engine.concat([dx, engine.row_norm(dx), du, engine.row_norm(du)], axis=1)


class CrashSurrogate:
    """One model instance of any family; immutable during inference."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        store = ParamStore(seed)
        d = config.d_h
        edge_feat_dim = 2 * config.dim + 2

        self.encoder = MLP(store, "encoder", [config.d_node, d, d], config.mpnn_activation)
        if config.uses_mesh:
            self.edge_encoder = MLP(store, "edge_encoder", [edge_feat_dim, d, d], config.mpnn_activation)
            self.pre_blocks = [MPNNBlock(store, f"pre.{k}", d, config.mpnn_activation)
                               for k in range(config.l_pre)]
            self.post_blocks = [MPNNBlock(store, f"post.{k}", d, config.mpnn_activation)
                                for k in range(config.l_post)]
        else:
            self.edge_encoder = None
            self.pre_blocks = []
            self.post_blocks = []
        if config.contact_enabled:
            self.contact_mlp = MLP(store, "contact.pair_mlp", [2 * d + config.dim + 2, d, d],
                                   config.mpnn_activation)
            self.contact_alpha = store.param("contact.alpha", (1,), init="constant",
                                             value=config.contact_alpha_init)
        else:
            self.contact_mlp = None
            self.contact_alpha = None
        if config.kernel == "geo":
            self.geo_mlp = MLP(store, "geo.embed", [config.dim, 2 * config.geo_embed_dim,
                                                    config.geo_embed_dim], config.attn_activation)
        else:
            self.geo_mlp = None
        self.attn_blocks = [AttentionBlock(store, f"attn.{k}", config)
                            for k in range(config.l_attn)]
        self.decoder = MLP(store, "decoder", [d, d, config.dim], config.mpnn_activation)

        self.params = store.params
        self.last_slice_weights: list[np.ndarray] = []

    # -- parameter plumbing -------------------------------------------------

    def state_dict(self) -> dict:
        return {name: p.values.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"state dict mismatch; missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
        for name, values in state.items():
            p = self.params[name]
            if p.values.shape != values.shape:
                raise ConfigError(f"shape mismatch for {name}: {p.values.shape} vs {values.shape}")
            p.values = np.array(values, dtype=np.float64)

    # -- forward ------------------------------------------------------------

    def _validate_contacts(self, contacts: ContactSet | None):
        if self.config.contact_enabled and contacts is None:
            raise ConfigError(f"{self.config.family} needs a ContactSet at every step")
        if not self.config.contact_enabled and contacts is not None:
            raise ConfigError(f"contact supplied to contact-free family {self.config.family}")

    def forward(self, graph: MeshGraph, x: Tensor, v: Tensor, stats: NormStats,
                contacts: ContactSet | None = None) -> Tensor:
        """Normalized accelerations for all nodes, shape (N, dim)."""
        cfg = self.config
        self._validate_contacts(contacts)
        if graph.dim != cfg.dim:
            raise ConfigError(f"graph dim {graph.dim} does not match config dim {cfg.dim}")
        n_static = cfg.d_node - cfg.dim
        if n_static > graph.static_features.shape[1]:
            raise ConfigError(
                f"d_node={cfg.d_node} needs {n_static} static columns, graph has "
                f"{graph.static_features.shape[1]}")

        vel_norm = engine.mul(
            engine.sub(v, engine.constant(stats.feature_mean)),
            engine.constant(1.0 / stats.feature_std),
        )
        feats = engine.concat([vel_norm, engine.constant(graph.static_features[:, :n_static])], axis=1)

        h = self.encoder(feats)
        LatentField(h, "H0").validate(cfg.d_h)

        e = None
        if cfg.uses_mesh:
            e = self.edge_encoder(edge_feature_tensors(graph, x))
        for block in self.pre_blocks:
            h, e = block(h, e, graph)
        LatentField(h, "H1").validate(cfg.d_h)

        if cfg.contact_enabled:
            h = contact_residual(h, contacts, self.contact_alpha, self.contact_mlp, x, graph)
            LatentField(h, "H1~").validate(cfg.d_h)

        geo_emb = None
        if self.geo_mlp is not None:
            geo_emb = self.geo_mlp(engine.constant(normalized_reference_positions(graph)))
        self.last_slice_weights = []
        for block in self.attn_blocks:
            h, w = block(h, geo_emb)
            self.last_slice_weights.append(w.values)
        LatentField(h, "H2").validate(cfg.d_h)

        for block in self.post_blocks:
            h, e = block(h, e, graph)
        LatentField(h, "H3").validate(cfg.d_h)

        return self.decoder(h)

    def predict(self, graph: MeshGraph, state: NodeState, stats: NormStats,
                contacts: ContactSet | None = None) -> np.ndarray:
        """Inference wrapper: numpy in, normalized accelerations out."""
        with engine.no_grad():
            out = self.forward(graph, engine.constant(state.positions),
                               engine.constant(state.velocities), stats, contacts)
        return out.values
