"""Progressive referent pipeline: voting, message passing, attention, refine.

The pipeline turns an encoded scene (N point tokens) into M spatially aware
visual referents in four stages, each widening the perception field:

1. ``intra_referent``   -- FPS seeds vote toward object centers, then local
   neighborhoods are clustered and max-pooled into referent features.
2. ``inter_referent``   -- graph convolution over a k-NN proximity graph of
   referent positions mixes information between referents.
3. ``contextual_interactions`` -- self- and cross-attention blocks mix
   referents with the full scene feature set.
4. ``refine_location``  -- a final offset head nudges referent positions
   toward nearby object centroids.

Positions only change in the vote and refine steps; every other stage is
feature-only. Two losses supervise the geometry: mean distance of refined
positions to their nearest object centroids, and mean mismatch of pairwise
referent distances against the matched centroid distances. Everything runs
on the autodiff tape so the whole scheme is trainable and finite-difference
checkable at toy scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .geometry import ball_query, fps, knn_adjacency, nearest_object_centroid
from .scenes import SceneRecord, scene_point_cloud

__all__ = [
    "STAGES",
    "SchemeConfig",
    "SceneFeatures",
    "VisualReferentSet",
    "VisualPrompt",
    "LossBreakdown",
    "ReferentModel",
    "encode_scene_stub",
    "gcn_propagate",
    "loss_center",
    "loss_psc",
    "loss_total",
    "train_toy",
    "TrainStep",
    "TrainResult",
    "save_checkpoint",
    "load_checkpoint",
]

STAGES = ("intra", "gcn", "contextual", "refined")


@dataclass(frozen=True)
class SchemeConfig:
    """Model sizes; defaults are the toy scale used in tests and demos."""

    n_points: int = 128  # N encoded scene tokens
    feat_dim: int = 16  # d
    n_referents: int = 16  # M
    cluster_radius: float = 0.3
    cluster_max_k: int = 16
    gcn_layers: int = 2
    graph_k: int = 3
    attn_blocks: int = 2
    prompt_dim: int = 32
    encoder_seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_referents <= self.n_points:
            raise ValueError("need 1 <= n_referents <= n_points")
        if self.graph_k >= self.n_referents:
            raise ValueError("graph_k must be < n_referents")


@dataclass
class SceneFeatures:
    """Encoded scene: row i of features describes the point at positions[i]."""

    positions: np.ndarray  # (N, 3)
    features: np.ndarray  # (N, d)

    def __post_init__(self):
        if self.positions.shape[0] != self.features.shape[0]:
            raise ValueError("positions and features must align row-wise")


@dataclass
class VisualReferentSet:
    positions: Tensor  # (M, 3)
    features: Tensor  # (M, d)
    stage: str
    seed_indices: np.ndarray | None = None
    seed_positions: np.ndarray | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    @property
    def count(self) -> int:
        return self.positions.rows


@dataclass
class VisualPrompt:
    """Projected referent rows ready to prepend to a language prompt."""

    prompt: Tensor  # (M, prompt_dim)
    positions: Tensor  # (M, 3), carried through unchanged


def _require_stage(vr: VisualReferentSet, stage: str, op: str):
    if vr.stage != stage:
        raise ValueError(f"{op} expects stage {stage!r}, got {vr.stage!r}")


# --------------------------------------------------------------------------
# scene encoder stand-in


def encode_scene_stub(points: np.ndarray, cfg: SchemeConfig) -> SceneFeatures:
    """Deterministic stand-in for a learned point-cloud encoder.

    Subsamples ``cfg.n_points`` points with FPS and lifts each to
    ``cfg.feat_dim`` features via a fixed-seed random projection of its
    normalized position and local density, squashed with tanh. Same cloud
    and seed always produce bitwise-identical output.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (P, 3), got {pts.shape}")
    if pts.shape[0] < cfg.n_points:
        raise ValueError(
            f"cloud has {pts.shape[0]} points, need >= {cfg.n_points}"
        )
    idx = fps(pts, cfg.n_points)
    pos = pts[idx]

    centroid = pts.mean(axis=0)
    scale = float(np.max(np.linalg.norm(pts - centroid, axis=1)))
    if scale == 0.0:
        raise ValueError("degenerate cloud: all points coincide")
    normed = (pos - centroid) / scale

    # local density: mean distance to the 8 nearest cloud points
    k = min(8, pts.shape[0] - 1)
    dists = np.linalg.norm(pos[:, None, :] - pts[None, :, :], axis=2)
    dists.sort(axis=1)
    density = dists[:, 1 : k + 1].mean(axis=1, keepdims=True) / scale

    raw = np.hstack([normed, density])  # (N, 4)
    rng = np.random.default_rng(cfg.encoder_seed)
    proj = rng.normal(0.0, 1.0, size=(4, cfg.feat_dim))
    return SceneFeatures(positions=pos, features=np.tanh(raw @ proj))


# --------------------------------------------------------------------------
# parameters


def _ffn_params(rng, d_in: int, d_hidden: int, d_out: int, zero_last: bool):
    w1 = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, d_hidden))
    w2 = (
        np.zeros((d_hidden, d_out))
        if zero_last
        else rng.normal(0.0, 1.0 / math.sqrt(d_hidden), size=(d_hidden, d_out))
    )
    return {
        "w1": w1,
        "b1": np.zeros((1, d_hidden)),
        "w2": w2,
        "b2": np.zeros((1, d_out)),
    }


def init_params(cfg: SchemeConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameter set. Offset heads start at zero so positions begin
    exactly at their seeds."""
    rng = np.random.default_rng(seed)
    d = cfg.feat_dim
    arrays: dict[str, np.ndarray] = {}

    for key, arr in _ffn_params(rng, d, d, 3, zero_last=True).items():
        arrays[f"vote/{key}"] = arr
    arrays["cluster/w"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))
    arrays["cluster/b"] = np.zeros((1, d))
    for layer in range(cfg.gcn_layers):
        arrays[f"gcn.{layer}/w"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))
    for blk in range(cfg.attn_blocks):
        for role in ("self", "cross"):
            for mat in ("wq", "wk", "wv"):
                arrays[f"attn.{blk}/{role}_{mat}"] = rng.normal(
                    0.0, 1.0 / math.sqrt(d), size=(d, d)
                )
        for tag in ("ffn1", "ffn2"):
            for key, arr in _ffn_params(rng, d, d, d, zero_last=False).items():
                arrays[f"attn.{blk}/{tag}_{key}"] = arr
    for key, arr in _ffn_params(rng, d, d, 3, zero_last=True).items():
        arrays[f"refine/{key}"] = arr
    for key, arr in _ffn_params(
        rng, d + 3, cfg.prompt_dim, cfg.prompt_dim, zero_last=False
    ).items():
        arrays[f"proj/{key}"] = arr

    return {
        name: Tensor(arr, requires_grad=True, name=name)
        for name, arr in arrays.items()
    }


def param_block(name: str) -> str:
    """Logical block of a parameter, e.g. 'attn.0/self_wq' -> 'attn.0'."""
    return name.split("/", 1)[0]


def _ffn2(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}w1"]), params[f"{prefix}b1"]))
    return ad.add(ad.matmul(h, params[f"{prefix}w2"]), params[f"{prefix}b2"])


def gcn_propagate(
    adjacency: np.ndarray,
    features: Tensor,
    weights: list[Tensor],
    activation: str = "relu",
) -> Tensor:
    """Stacked graph-convolution layers: h <- act(A h W) per layer."""
    if activation not in ("relu", "identity"):
        raise ValueError(f"unknown activation {activation!r}")
    a = Tensor(adjacency)
    h = features
    for w in weights:
        h = ad.matmul(ad.matmul(a, h), w)
        if activation == "relu":
            h = ad.relu(h)
    return h


def _attention(
    queries: Tensor, context: Tensor, params: dict[str, Tensor], prefix: str
) -> Tensor:
    """Single-head scaled dot-product attention."""
    q = ad.matmul(queries, params[f"{prefix}wq"])
    k = ad.matmul(context, params[f"{prefix}wk"])
    v = ad.matmul(context, params[f"{prefix}wv"])
    logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(q.cols))
    return ad.matmul(ad.softmax_rows(logits), v)


class ReferentModel:
    """Holds the scheme parameters and runs the four-stage pipeline."""

    def __init__(
        self,
        cfg: SchemeConfig | None = None,
        seed: int = 0,
        params: dict[str, Tensor] | None = None,
    ):
        self.cfg = cfg or SchemeConfig()
        self.params = params if params is not None else init_params(self.cfg, seed)

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    def blocks(self) -> dict[str, dict[str, Tensor]]:
        """Parameters grouped by logical block, for reporting."""
        grouped: dict[str, dict[str, Tensor]] = {}
        for name, p in self.params.items():
            grouped.setdefault(param_block(name), {})[name] = p
        return grouped

    # -- stages ------------------------------------------------------------

    def intra_referent(self, scene: SceneFeatures) -> VisualReferentSet:
        """Vote seed points toward object centers and pool local features."""
        cfg = self.cfg
        if scene.positions.shape[0] < cfg.n_referents:
            raise ValueError("scene has fewer points than requested referents")
        seed_idx = fps(scene.positions, cfg.n_referents)
        f_enc = Tensor(scene.features)
        p_seed = Tensor(scene.positions[seed_idx])
        f_seed = ad.gather_rows(f_enc, seed_idx)

        offsets = _ffn2(f_seed, self.params, "vote/")
        p_vr = ad.add(p_seed, offsets)

        groups = ball_query(
            p_vr.values, scene.positions, cfg.cluster_radius, cfg.cluster_max_k
        )
        lifted = ad.relu(
            ad.add(ad.matmul(f_enc, self.params["cluster/w"]), self.params["cluster/b"])
        )
        pooled = ad.max_pool_groups(lifted, groups)
        return VisualReferentSet(
            positions=p_vr,
            features=pooled,
            stage="intra",
            seed_indices=seed_idx,
            seed_positions=scene.positions[seed_idx].copy(),
        )

    def inter_referent(self, vr: VisualReferentSet) -> VisualReferentSet:
        """Message passing over the referent proximity graph; positions fixed."""
        _require_stage(vr, "intra", "inter_referent")
        if vr.count < 2:
            raise ValueError("inter_referent needs at least 2 referents")
        adjacency = knn_adjacency(vr.positions.values, self.cfg.graph_k)
        weights = [
            self.params[f"gcn.{layer}/w"] for layer in range(self.cfg.gcn_layers)
        ]
        features = gcn_propagate(adjacency.matrix, vr.features, weights)
        return replace(vr, features=features, stage="gcn")

    def contextual_interactions(
        self, vr: VisualReferentSet, scene: SceneFeatures
    ) -> VisualReferentSet:
        """Self/cross attention blocks against the full scene; positions fixed."""
        _require_stage(vr, "gcn", "contextual_interactions")
        if scene.features.shape[1] != vr.features.cols:
            raise ValueError("scene and referent feature widths differ")
        ctx = Tensor(scene.features)
        x = vr.features
        for blk in range(self.cfg.attn_blocks):
            prefix = f"attn.{blk}/"
            x = ad.add(x, _attention(x, x, self.params, prefix + "self_"))
            x = ad.add(x, _ffn2(x, self.params, prefix + "ffn1_"))
            x = ad.add(x, _attention(x, ctx, self.params, prefix + "cross_"))
            x = ad.add(x, _ffn2(x, self.params, prefix + "ffn2_"))
        return replace(vr, features=x, stage="contextual")

    def refine_location(self, vr: VisualReferentSet) -> VisualReferentSet:
        """Final positional offsets; features pass through unchanged."""
        _require_stage(vr, "contextual", "refine_location")
        offsets = _ffn2(vr.features, self.params, "refine/")
        return replace(vr, positions=ad.add(vr.positions, offsets), stage="refined")

    def forward(self, scene: SceneFeatures) -> VisualReferentSet:
        vr = self.intra_referent(scene)
        vr = self.inter_referent(vr)
        vr = self.contextual_interactions(vr, scene)
        return self.refine_location(vr)

    def project_visual_prompt(self, vr: VisualReferentSet) -> VisualPrompt:
        """Map [features, positions] rows into the prompt space."""
        _require_stage(vr, "refined", "project_visual_prompt")
        z = ad.concat_cols(vr.features, vr.positions)
        if z.cols != self.params["proj/w1"].rows:
            raise ValueError(
                f"projector expects width {self.params['proj/w1'].rows}, got {z.cols}"
            )
        return VisualPrompt(
            prompt=_ffn2(z, self.params, "proj/"), positions=vr.positions
        )


# --------------------------------------------------------------------------
# losses


def _as_positions_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        t = x
    else:
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"positions must be (M, 3), got {arr.shape}")
        t = Tensor(arr)
    if t.cols != 3:
        raise ValueError(f"positions must have 3 columns, got {t.cols}")
    return t


def loss_center(pred, gt) -> Tensor:
    """Mean Euclidean distance between predicted and target positions."""
    p = _as_positions_tensor(pred)
    g = np.asarray(gt.values if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if g.shape != p.shape:
        raise ValueError(f"pred/gt shape mismatch: {p.shape} vs {g.shape}")
    if p.rows < 1:
        raise ValueError("need at least one position pair")
    return ad.mean(ad.l2_norm_rows(ad.sub(p, Tensor(g))))


def loss_psc(pred, gt) -> tuple[Tensor, bool]:
    """Mean |pairwise-distance mismatch| over all unordered position pairs.

    Returns ``(loss, degenerate)``; with fewer than two positions the loss
    is zero and the degenerate flag is set. Invariant under any common
    translation of the predictions.
    """
    p = _as_positions_tensor(pred)
    g = np.asarray(gt.values if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if g.shape != p.shape:
        raise ValueError(f"pred/gt shape mismatch: {p.shape} vs {g.shape}")
    m = p.rows
    if m < 2:
        return Tensor(np.zeros((1, 1))), True
    iu, ju = np.triu_indices(m, k=1)
    d_pred = ad.l2_norm_rows(ad.sub(ad.gather_rows(p, iu), ad.gather_rows(p, ju)))
    d_gt = Tensor(np.linalg.norm(g[iu] - g[ju], axis=1, keepdims=True))
    return ad.mean(ad.absval(ad.sub(d_pred, d_gt))), False


@dataclass(frozen=True)
class LossBreakdown:
    l_llm: float
    l_psc: float
    l_center: float
    alpha1: float
    alpha2: float
    total: float


def loss_total(
    l_llm: float,
    l_psc: float,
    l_center: float,
    alpha1: float = 1.0,
    alpha2: float = 1.0,
) -> LossBreakdown:
    """Combine the externally supplied language loss with the spatial ones."""
    for name, v in (("l_llm", l_llm), ("l_psc", l_psc), ("l_center", l_center)):
        if v < 0:
            raise ValueError(f"{name} must be >= 0, got {v}")
    return LossBreakdown(
        l_llm=l_llm,
        l_psc=l_psc,
        l_center=l_center,
        alpha1=alpha1,
        alpha2=alpha2,
        total=l_llm + alpha1 * l_psc + alpha2 * l_center,
    )


def assign_gt_centroids(positions: np.ndarray, boxes) -> np.ndarray:
    """Target centroid for each position: the nearest object's center."""
    return np.stack([nearest_object_centroid(p, boxes)[1] for p in positions])


# --------------------------------------------------------------------------
# toy training


@dataclass
class TrainStep:
    step: int
    l_center: float
    l_psc: float
    total: float


@dataclass
class TrainResult:
    trace: list[TrainStep]
    model: ReferentModel
    scene_diagonal: float

    @property
    def final(self) -> TrainStep:
        return self.trace[-1]


def spatial_objective(
    model: ReferentModel,
    scene: SceneFeatures,
    gt: np.ndarray,
    alpha1: float = 1.0,
    alpha2: float = 1.0,
    l_llm: float = 0.0,
    with_prompt_probe: bool = False,
):
    """Forward pass plus the weighted spatial losses, as a scalar tensor.

    ``with_prompt_probe`` adds the mean prompt-row norm so gradients also
    flow through the projector, which the spatial losses alone never touch.
    Returns (total, l_center, l_psc, refined_vr).
    """
    vr = model.forward(scene)
    lc = loss_center(vr.positions, gt)
    lp, _ = loss_psc(vr.positions, gt)
    total = ad.add(ad.scale(lp, alpha1), ad.scale(lc, alpha2))
    if l_llm:
        total = ad.add(total, Tensor(np.full((1, 1), float(l_llm))))
    if with_prompt_probe:
        probe = ad.mean(ad.l2_norm_rows(model.project_visual_prompt(vr).prompt))
        total = ad.add(total, probe)
    return total, lc, lp, vr


def train_toy(
    scene: SceneRecord,
    cfg: SchemeConfig | None = None,
    steps: int = 500,
    lr: float = 1e-2,
    seed: int = 0,
    alpha1: float = 1.0,
    alpha2: float = 1.0,
    l_llm: float = 0.0,
    points_per_object: int = 64,
) -> TrainResult:
    """Overfit the scheme on one scene with plain gradient descent.

    The target for each referent is the centroid of its nearest object,
    re-assigned from the refined positions every step. Deterministic for a
    fixed (scene, cfg, seed).
    """
    if len(scene.objects) < 2:
        raise ValueError("train_toy needs a scene with >= 2 objects")
    cfg = cfg or SchemeConfig()
    cloud = scene_point_cloud(scene, points_per_object, seed=seed)
    encoded = encode_scene_stub(cloud, cfg)
    model = ReferentModel(cfg, seed=seed)
    boxes = [o.box for o in scene.objects]

    trace: list[TrainStep] = []
    for step in range(steps):
        model.zero_grads()
        try:
            with Tape() as tape:
                vr_probe = model.forward(encoded)
                gt = assign_gt_centroids(vr_probe.positions.values, boxes)
                lc = loss_center(vr_probe.positions, gt)
                lp, _ = loss_psc(vr_probe.positions, gt)
                total = ad.add(ad.scale(lp, alpha1), ad.scale(lc, alpha2))
                if l_llm:
                    total = ad.add(total, Tensor(np.full((1, 1), float(l_llm))))
                tape.backward(total)
        except ad.NumericError as exc:
            raise ad.NumericError(exc.op, f"diverged at step {step}") from exc
        trace.append(
            TrainStep(step=step, l_center=lc.item(), l_psc=lp.item(), total=total.item())
        )
        if lr != 0.0:
            for p in model.params.values():
                if p.grad is not None:
                    p.values -= lr * p.grad
    return TrainResult(trace=trace, model=model, scene_diagonal=scene.diagonal())


# --------------------------------------------------------------------------
# checkpoint io

_CHECKPOINT_HEADER = "# scenegrid checkpoint v1"

_CFG_FIELDS = (
    "n_points",
    "feat_dim",
    "n_referents",
    "cluster_radius",
    "cluster_max_k",
    "gcn_layers",
    "graph_k",
    "attn_blocks",
    "prompt_dim",
    "encoder_seed",
)


def save_checkpoint(model: ReferentModel, path):
    """Plain-text checkpoint: config lines, then one line per parameter
    (name, rows, cols, row-major values with full float precision)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_CHECKPOINT_HEADER + "\n")
        for name in _CFG_FIELDS:
            fh.write(f"cfg {name} {getattr(model.cfg, name)!r}\n")
        for name in sorted(model.params):
            p = model.params[name]
            flat = " ".join(repr(v) for v in p.values.reshape(-1))
            fh.write(f"param {name} {p.rows} {p.cols} {flat}\n")


def load_checkpoint(path) -> ReferentModel:
    cfg_kwargs: dict = {}
    params: dict[str, Tensor] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != _CHECKPOINT_HEADER:
            raise ValueError(f"{path}: not a scenegrid checkpoint")
        for line_no, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(" ")
            if not parts or parts[0] == "":
                continue
            if parts[0] == "cfg":
                _, name, value = parts
                field_type = SchemeConfig.__dataclass_fields__[name].type
                cfg_kwargs[name] = float(value) if "float" in field_type else int(value)
            elif parts[0] == "param":
                name, rows, cols = parts[1], int(parts[2]), int(parts[3])
                values = np.array([float(v) for v in parts[4:]], dtype=np.float64)
                if values.size != rows * cols:
                    raise ValueError(f"{path}:{line_no}: value count mismatch")
                params[name] = Tensor(
                    values.reshape(rows, cols), requires_grad=True, name=name
                )
            else:
                raise ValueError(f"{path}:{line_no}: unknown record {parts[0]!r}")
    return ReferentModel(cfg=SchemeConfig(**cfg_kwargs), params=params)
