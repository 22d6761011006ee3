"""Cluster-based point-cloud descriptor network.

Architecture: a 9-d per-point input (color, frame-centered position, normal)
is lifted by an affine stem, then passed through stages of

    reducer_forward   fps-downsample + attention over k-NN neighborhoods,
                      gated per head by the pairwise geometric encoding
    cluster_forward   soft-affinity aggregation into fps centers and
                      residual dispatch back to the points

and finally encode_global, a single-output-point reducer variant, producing
one L2-normalized 256-d descriptor per frame.

The sampling pattern (fps picks, neighbor lists, geometric gates, cluster
centers) depends only on the frame geometry, never on features, so it is
precomputed once per frame into a FramePlan and reused across training
steps. All forward functions accept an optional plan; without one they
compute the same quantities inline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from poco import autodiff as ad
from poco.autodiff import Tensor
from poco.errors import ContractViolation, FormatError
from poco.frames import PointFrame
from poco.geometry import GEOM_DIM, geom_encode_pairs
from poco.optim import Parameter, load_checkpoint, save_checkpoint
from poco.sampling import fps, knn

GEOM_MODE_RELATIVE = "relative"   # Eq.-2-style invariant pairwise encoding
GEOM_MODE_ABSOLUTE = "absolute"   # ablation: raw neighbor+center coordinates


@dataclass
class StageConfig:
    out_dim: int
    k_neighbors: int = 16
    reduce_ratio: int = 4
    heads: int = 4
    centers_ratio: int = 4

    def __post_init__(self) -> None:
        for name in ("out_dim", "k_neighbors", "reduce_ratio", "heads", "centers_ratio"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"StageConfig.{name} must be positive")
        if self.out_dim % self.heads != 0:
            raise ContractViolation(
                f"out_dim {self.out_dim} not divisible by heads {self.heads}")
        if self.centers_ratio < 2:
            raise ContractViolation("centers_ratio must be >= 2 (centers less than half)")

    def to_dict(self) -> dict:
        return {"out_dim": self.out_dim, "k_neighbors": self.k_neighbors,
                "reduce_ratio": self.reduce_ratio, "heads": self.heads,
                "centers_ratio": self.centers_ratio}

    @staticmethod
    def from_dict(d: dict) -> "StageConfig":
        return StageConfig(**d)


def default_stages() -> list[StageConfig]:
    return [StageConfig(out_dim=d) for d in (32, 64, 128, 256)]


@dataclass
class ModelConfig:
    stem_dim: int = 32
    stages: list[StageConfig] = field(default_factory=default_stages)
    descriptor_dim: int = 256
    encoder_heads: int = 4
    use_color: bool = True
    geom_mode: str = GEOM_MODE_RELATIVE

    def __post_init__(self) -> None:
        if self.geom_mode not in (GEOM_MODE_RELATIVE, GEOM_MODE_ABSOLUTE):
            raise ContractViolation(f"unknown geom_mode {self.geom_mode!r}")
        if self.descriptor_dim % self.encoder_heads != 0:
            raise ContractViolation("descriptor_dim not divisible by encoder_heads")
        if not self.stages:
            raise ContractViolation("at least one stage required")

    @property
    def gate_dim(self) -> int:
        return GEOM_DIM if self.geom_mode == GEOM_MODE_RELATIVE else 6

    def to_dict(self) -> dict:
        return {"stem_dim": self.stem_dim,
                "stages": [s.to_dict() for s in self.stages],
                "descriptor_dim": self.descriptor_dim,
                "encoder_heads": self.encoder_heads,
                "use_color": self.use_color,
                "geom_mode": self.geom_mode}

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["stages"] = [StageConfig.from_dict(s) for s in d["stages"]]
        return ModelConfig(**d)

    def cache_key(self) -> tuple:
        """Geometry-relevant identity (plans may be shared across configs with equal keys)."""
        return (self.geom_mode,
                tuple((s.k_neighbors, s.reduce_ratio, s.centers_ratio) for s in self.stages))


@dataclass
class LevelState:
    """One resolution level: point geometry plus the feature graph node."""

    positions: np.ndarray  # (n, 3) float64
    normals: np.ndarray    # (n, 3) float64
    features: Tensor       # (n, d)

    @property
    def n(self) -> int:
        return int(self.positions.shape[0])


class ReducerParams:
    """Affine maps f1 (key), f2 (query), f3 (value), f4 (geometric gate)."""

    def __init__(self, prefix: str, params: dict[str, Parameter]):
        self.f1_w = params[f"{prefix}.f1.w"]
        self.f1_b = params[f"{prefix}.f1.b"]
        self.f2_w = params[f"{prefix}.f2.w"]
        self.f2_b = params[f"{prefix}.f2.b"]
        self.f3_w = params[f"{prefix}.f3.w"]
        self.f3_b = params[f"{prefix}.f3.b"]
        self.f4_w = params[f"{prefix}.f4.w"]
        self.f4_b = params[f"{prefix}.f4.b"]

    @property
    def heads(self) -> int:
        return int(self.f4_b.data.shape[0])

    @property
    def out_dim(self) -> int:
        return int(self.f1_w.data.shape[1])


class ClusterParams:
    """Affinity scale/bias and the affine dispatch map h."""

    def __init__(self, prefix: str, params: dict[str, Parameter]):
        self.alpha = params[f"{prefix}.alpha"]
        self.beta = params[f"{prefix}.beta"]
        self.h_w = params[f"{prefix}.h.w"]
        self.h_b = params[f"{prefix}.h.b"]


# ---------------------------------------------------------------------------
# plans (geometry precomputation)


@dataclass
class ReducerPlan:
    sel_idx: np.ndarray        # (m,) indices of fps-selected points
    neigh_idx: np.ndarray      # (m, k) k-NN of each selected point in the input level
    gate_input: np.ndarray     # (m, k, gate_dim) float64, constant w.r.t. gradients
    # prebuilt backward scatters (optional; filled when feature dims are known)
    sel_scatter: ad.ScatterSpec | None = None
    neigh_scatter: ad.ScatterSpec | None = None


@dataclass
class ClusterPlan:
    center_idx: np.ndarray     # (c,) fps centers within the level
    init_idx: np.ndarray       # (c, K) spatially nearest points per center
    init_scatter: ad.ScatterSpec | None = None


@dataclass
class EncoderPlan:
    gate_input: np.ndarray     # (1, n, gate_dim)
    neigh_scatter: ad.ScatterSpec | None = None


@dataclass
class FramePlan:
    stages: list[tuple[ReducerPlan, ClusterPlan]]
    encoder: EncoderPlan
    level_sizes: list[int]     # input size then size after each stage


def _gate_input(mode: str, p: np.ndarray, n: np.ndarray,
                p_k: np.ndarray, n_k: np.ndarray) -> np.ndarray:
    if mode == GEOM_MODE_RELATIVE:
        return geom_encode_pairs(p, n, p_k, n_k)
    # ablation: absolute coordinates of neighbor and center, no relative encoding
    center = np.broadcast_to(p[:, None, :], p_k.shape)
    return np.concatenate([p_k, center], axis=-1)


def _mean_normal(normals: np.ndarray) -> np.ndarray:
    m = normals.mean(axis=0)
    norm = np.linalg.norm(m)
    if norm < 1e-9:
        return np.array([0.0, 0.0, 1.0])
    return m / norm


def reducer_plan(positions: np.ndarray, normals: np.ndarray,
                 cfg: StageConfig, mode: str) -> ReducerPlan:
    n = positions.shape[0]
    if n < cfg.k_neighbors:
        raise ContractViolation(f"reducer needs n >= k_neighbors ({cfg.k_neighbors}), got n={n}")
    n_out = max(1, n // cfg.reduce_ratio)
    sel = fps(positions, n_out).indices
    neigh = knn(positions[sel], positions, cfg.k_neighbors).indices
    gate = _gate_input(mode, positions[sel], normals[sel],
                       positions[neigh], normals[neigh])
    return ReducerPlan(sel_idx=sel, neigh_idx=neigh, gate_input=gate)


def cluster_plan(positions: np.ndarray, cfg: StageConfig) -> ClusterPlan:
    n = positions.shape[0]
    if n < cfg.centers_ratio:
        raise ContractViolation(f"cluster needs n >= centers_ratio ({cfg.centers_ratio}), got n={n}")
    c = max(1, n // cfg.centers_ratio)
    centers = fps(positions, c).indices
    k_init = min(cfg.k_neighbors, n)
    init = knn(positions[centers], positions, k_init).indices
    return ClusterPlan(center_idx=centers, init_idx=init)


def encoder_plan(positions: np.ndarray, normals: np.ndarray, mode: str) -> EncoderPlan:
    virtual_p = positions.mean(axis=0)
    virtual_n = _mean_normal(normals)
    gate = _gate_input(mode, virtual_p[None, :], virtual_n[None, :],
                       positions[None, :, :], normals[None, :, :])
    return EncoderPlan(gate_input=gate)


def build_plan(positions: np.ndarray, normals: np.ndarray, config: ModelConfig) -> FramePlan:
    """Precompute all sampling/gating geometry for one frame."""
    pos = np.asarray(positions, dtype=np.float64)
    nrm = np.asarray(normals, dtype=np.float64)
    stages: list[tuple[ReducerPlan, ClusterPlan]] = []
    sizes = [pos.shape[0]]
    d_in = config.stem_dim
    for cfg in config.stages:
        n = pos.shape[0]
        rp = reducer_plan(pos, nrm, cfg, config.geom_mode)
        rp.sel_scatter = ad.make_scatter(rp.sel_idx, n, d_in)
        rp.neigh_scatter = ad.make_scatter(rp.neigh_idx, n, cfg.out_dim)
        pos, nrm = pos[rp.sel_idx], nrm[rp.sel_idx]
        cp = cluster_plan(pos, cfg)
        cp.init_scatter = ad.make_scatter(cp.init_idx, pos.shape[0], cfg.out_dim)
        stages.append((rp, cp))
        sizes.append(pos.shape[0])
        d_in = cfg.out_dim
    enc = encoder_plan(pos, nrm, config.geom_mode)
    enc.neigh_scatter = ad.make_scatter(np.arange(pos.shape[0], dtype=np.int64),
                                        pos.shape[0], config.descriptor_dim)
    return FramePlan(stages=stages, encoder=enc, level_sizes=sizes)


def level_sizes(n0: int, config: ModelConfig) -> list[int]:
    """Point counts entering the stem and leaving each stage."""
    sizes = [n0]
    n = n0
    for cfg in config.stages:
        n = max(1, n // cfg.reduce_ratio)
        sizes.append(n)
    return sizes


# ---------------------------------------------------------------------------
# forward blocks


def _multihead_attend(keys_src: Tensor, query: Tensor, values_src: Tensor,
                      neigh_idx: np.ndarray, gate_input: np.ndarray,
                      params: ReducerParams,
                      capture: dict | None = None, tag: str = "",
                      neigh_scatter: ad.ScatterSpec | None = None) -> Tensor:
    """Shared Eq.-1 aggregation: per-head softmax attention times geometric gate.

    keys_src/values_src: (n, d_in) features of the input level;
    query: (m, d_in) features of the output points;
    neigh_idx: (m, k); gate_input: (m, k, gate_dim). Returns (m, out_dim).
    """
    m, k = neigh_idx.shape
    heads = params.heads
    d_out = params.out_dim
    d_head = d_out // heads

    f1 = ad.affine(keys_src, params.f1_w.value, params.f1_b.value)              # (n, D)
    f3 = ad.affine(values_src, params.f3_w.value, params.f3_b.value)            # (n, D)
    f2 = ad.affine(query, params.f2_w.value, params.f2_b.value)                 # (m, D)

    # head-major stacks: (m, H, k, d_head) keys/values, (m, H, d_head, 1) query
    f1g = ad.transpose(ad.reshape(ad.gather_rows(f1, neigh_idx, neigh_scatter),
                                  (m, k, heads, d_head)), (0, 2, 1, 3))
    f3g = ad.transpose(ad.reshape(ad.gather_rows(f3, neigh_idx, neigh_scatter),
                                  (m, k, heads, d_head)), (0, 2, 1, 3))
    f2r = ad.reshape(f2, (m, heads, d_head, 1))

    logits = ad.mul(ad.reshape(ad.matmul(f1g, f2r), (m, heads, k)),
                    ad.as_tensor(1.0 / np.sqrt(d_head)))
    psi = ad.softmax(logits, axis=2)                                            # (m, H, k)

    gate_flat = ad.affine(Tensor(gate_input.reshape(m * k, -1)),
                          params.f4_w.value, params.f4_b.value)
    gate = ad.transpose(ad.reshape(gate_flat, (m, k, heads)), (0, 2, 1))        # (m, H, k)

    if capture is not None:
        capture.setdefault("attention", {})[tag] = psi.data

    w = ad.reshape(ad.mul(psi, gate), (m, heads, 1, k))
    agg = ad.matmul(w, f3g)                                                     # (m, H, 1, d_head)
    return ad.reshape(agg, (m, d_out))


def reducer_forward(state: LevelState, cfg: StageConfig, params: ReducerParams,
                    plan: ReducerPlan | None = None,
                    capture: dict | None = None, tag: str = "reducer") -> LevelState:
    """Downsample by fps and aggregate k-NN neighborhoods (attention x geometric gate).

    Standalone calls (no plan) use the relative geometric gate; model_forward
    passes plans built for the configured geom_mode.
    """
    if plan is None:
        plan = reducer_plan(state.positions, state.normals, cfg, GEOM_MODE_RELATIVE)
    query = ad.gather_rows(state.features, plan.sel_idx, plan.sel_scatter)
    out = _multihead_attend(state.features, query, state.features,
                            plan.neigh_idx, plan.gate_input, params, capture, tag,
                            neigh_scatter=plan.neigh_scatter)
    return LevelState(positions=state.positions[plan.sel_idx],
                      normals=state.normals[plan.sel_idx],
                      features=out)


def cluster_forward(state: LevelState, cfg: StageConfig, params: ClusterParams,
                    plan: ClusterPlan | None = None,
                    capture: dict | None = None, tag: str = "cluster") -> LevelState:
    """Soft-affinity aggregation into centers and residual dispatch back to points.

    Centers are fps picks; each center's anchor feature is the mean of its K
    spatially nearest point features. Affinity s = sigmoid(alpha*cos + beta);
    aggregation is the anchor-stabilized convex form with C = 1 + sum_p s;
    dispatch adds h(s_cp * f_c), summed over every center, onto each point.
    """
    if plan is None:
        plan = cluster_plan(state.positions, cfg)
    X = state.features
    n, d = X.data.shape
    c = plan.center_idx.shape[0]

    anchor = ad.tmean(ad.gather_rows(X, plan.init_idx, plan.init_scatter), axis=1)  # (c, d)
    cosine = ad.matmul(ad.l2_normalize(anchor, axis=1),
                       ad.transpose(ad.l2_normalize(X, axis=1)))                # (c, n)
    s = ad.sigmoid(ad.add(ad.mul(cosine, params.alpha.value), params.beta.value))

    denom = ad.add(ad.tsum(s, axis=1, keepdims=True), ad.as_tensor(1.0))        # (c, 1)
    centers = ad.div(ad.add(anchor, ad.matmul(s, X)), denom)                    # Eq.-3 form

    if capture is not None:
        capture.setdefault("affinity", {})[tag] = s.data
        capture.setdefault("centers", {})[tag] = centers.data

    # dispatch: X + sum_c h(s_cp * f_c); with affine h this is exactly
    # s^T (f_c W_h) + c * b_h added to X (linearity in the scaled centers).
    moved = ad.matmul(ad.transpose(s), ad.matmul(centers, params.h_w.value))    # (n, d)
    bias = ad.mul(params.h_b.value, ad.as_tensor(float(c)))
    out = ad.add(ad.add(X, moved), bias)
    return LevelState(positions=state.positions, normals=state.normals, features=out)


def encode_global(state: LevelState, params: ReducerParams,
                  plan: EncoderPlan | None = None,
                  capture: dict | None = None) -> Tensor:
    """Reducer variant with one virtual output point -> L2-normalized descriptor.

    The virtual point sits at the level centroid with the averaged normal;
    its neighborhood is every input point, whose features are L2-normalized
    before aggregation. The virtual query feature is their mean.
    """
    if state.n < 1:
        raise ContractViolation("encode_global needs at least one point")
    if plan is None:
        plan = encoder_plan(state.positions, state.normals, GEOM_MODE_RELATIVE)
    n = state.n
    normed = ad.l2_normalize(state.features, axis=1)
    query = ad.tmean(normed, axis=0, keepdims=True)                             # (1, d)
    neigh = np.arange(n, dtype=np.int64)[None, :]
    agg = _multihead_attend(normed, query, normed, neigh, plan.gate_input,
                            params, capture, "encoder",
                            neigh_scatter=plan.neigh_scatter)
    return ad.l2_normalize(ad.reshape(agg, (params.out_dim,)), axis=-1)


class PocoModel:
    """Parameter set + configs. Forward lives in model_forward."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self._params = params
        self.stem_w = params["stem.w"]
        self.stem_b = params["stem.b"]
        self.stages: list[tuple[ReducerParams, ClusterParams]] = []
        for i in range(len(config.stages)):
            prefix = f"stage{i + 1}"
            self.stages.append((ReducerParams(prefix, params), ClusterParams(prefix, params)))
        self.encoder = ReducerParams("encoder", params)

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.zero_grad()


def _param_specs(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) for every parameter, in canonical order."""
    specs: list[tuple[str, tuple[int, ...], str]] = [
        ("stem.w", (9, config.stem_dim), "fanin"),
        ("stem.b", (config.stem_dim,), "zero"),
    ]
    d_in = config.stem_dim
    for i, st in enumerate(config.stages):
        p = f"stage{i + 1}"
        for f in ("f1", "f2", "f3"):
            specs.append((f"{p}.{f}.w", (d_in, st.out_dim), "fanin"))
            specs.append((f"{p}.{f}.b", (st.out_dim,), "zero"))
        specs.append((f"{p}.f4.w", (config.gate_dim, st.heads), "gate"))
        specs.append((f"{p}.f4.b", (st.heads,), "one"))
        specs.append((f"{p}.alpha", (), "one"))
        specs.append((f"{p}.beta", (), "zero"))
        specs.append((f"{p}.h.w", (st.out_dim, st.out_dim), "zero"))
        specs.append((f"{p}.h.b", (st.out_dim,), "zero"))
        d_in = st.out_dim
    for f in ("f1", "f2", "f3"):
        specs.append((f"encoder.{f}.w", (d_in, config.descriptor_dim), "fanin"))
        specs.append((f"encoder.{f}.b", (config.descriptor_dim,), "zero"))
    specs.append(("encoder.f4.w", (config.gate_dim, config.encoder_heads), "gate"))
    specs.append(("encoder.f4.b", (config.encoder_heads,), "one"))
    return specs


def init_model(config: ModelConfig, seed: int = 0) -> PocoModel:
    """Seeded initialization. Values are rounded through float32 so that an
    untrained model and its freshly-written checkpoint agree bit-for-bit."""
    rng = np.random.default_rng(seed)
    params: dict[str, Parameter] = {}
    for name, shape, kind in _param_specs(config):
        if kind == "fanin":
            val = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        elif kind == "gate":
            val = rng.normal(0.0, 0.1 / np.sqrt(shape[0]), size=shape)
        elif kind == "one":
            val = np.ones(shape)
        else:
            val = np.zeros(shape)
        params[name] = Parameter(name, np.asarray(val, dtype=np.float32).astype(np.float64))
    return PocoModel(config, params)


POSITION_SCALE = 3.0  # meters mapped to ~unit range in the stem input


def stem_input(frame: PointFrame, config: ModelConfig) -> np.ndarray:
    """9-d per-point input: color (optionally zeroed), centered position, normal.

    Colors are shifted to [-0.5, 0.5] and centered positions divided by
    POSITION_SCALE so all nine channels live on comparable scales; the
    geometry-only ablation zeroes the color channels outright.
    """
    pos = frame.positions.astype(np.float64)
    col = (frame.colors.astype(np.float64) - 0.5 if config.use_color
           else np.zeros_like(pos))
    nrm = frame.normals.astype(np.float64)
    return np.concatenate(
        [col, (pos - pos.mean(axis=0)) / POSITION_SCALE, nrm], axis=1)


def model_forward(frame: PointFrame, model: PocoModel,
                  plan: FramePlan | None = None,
                  capture: dict | None = None) -> Tensor:
    """Frame -> unit-norm descriptor Tensor of shape (descriptor_dim,)."""
    if frame.normals is None:
        raise ContractViolation(
            "frame has no normals; run estimate_normals (or preprocess_frame) first")
    config = model.config
    pos = frame.positions.astype(np.float64)
    nrm = frame.normals.astype(np.float64)
    if plan is None:
        plan = build_plan(pos, nrm, config)

    feats = ad.affine(Tensor(stem_input(frame, config)),
                      model.stem_w.value, model.stem_b.value)
    state = LevelState(positions=pos, normals=nrm, features=feats)
    for i, (cfg, (rp, cp), (red_plan, clu_plan)) in enumerate(
            zip(config.stages, model.stages, plan.stages)):
        state = reducer_forward(state, cfg, rp, red_plan, capture, f"stage{i + 1}.reducer")
        state = cluster_forward(state, cfg, cp, clu_plan, capture, f"stage{i + 1}.cluster")
    return encode_global(state, model.encoder, plan.encoder, capture)


def descriptor_for_frame(frame: PointFrame, model: PocoModel,
                         plan: FramePlan | None = None) -> np.ndarray:
    """Convenience: forward pass returning a plain float64 array."""
    return model_forward(frame, model, plan).data.copy()


# ---------------------------------------------------------------------------
# persistence


_CHECKPOINT_KIND = "poco-model"


def save_model(path, model: PocoModel) -> None:
    """PCK1 checkpoint with the architecture in the metadata extension block."""
    save_checkpoint(path, model.parameters(),
                    metadata={"kind": _CHECKPOINT_KIND, "config": model.config.to_dict()})


def load_model(path) -> PocoModel:
    values, metadata = load_checkpoint(path)
    if not metadata or metadata.get("kind") != _CHECKPOINT_KIND:
        raise FormatError(f"checkpoint {path} lacks model metadata (kind={_CHECKPOINT_KIND!r})")
    config = ModelConfig.from_dict(metadata["config"])
    expected = {name: shape for name, shape, _ in _param_specs(config)}
    if set(expected) != set(values):
        missing = sorted(set(expected) - set(values))
        extra = sorted(set(values) - set(expected))
        raise FormatError(f"checkpoint parameters do not match config: "
                          f"missing={missing} unexpected={extra}")
    params: dict[str, Parameter] = {}
    for name, shape, _ in _param_specs(config):
        if tuple(values[name].shape) != shape:
            raise FormatError(f"checkpoint shape mismatch for {name!r}: "
                              f"{values[name].shape} vs {shape}")
        params[name] = Parameter(name, values[name])
    return PocoModel(config, params)
