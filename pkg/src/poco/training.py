"""Triplet mining, frame/plan caching, and the optimization loop.

Training consumes a dataset manifest: each step draws one or more
(query, positive, negatives) triplets, runs the model on every member,
scores cosine similarities, and applies one Adam update under a cosine
learning-rate schedule.  Positive/negative pools are purely geometric
(camera distance within a scene; any cross-scene frame is a negative), so
re-mining each epoch only re-rolls the random choices — the number of
usable queries, and therefore the step count and schedule length, is fixed
up front.

The metrics log is append-only text with one record per step::

    step lr loss_circle loss_triplet loss_total

written with repr-exact floats so a checkpoint-fidelity check can compare
the logged step-0 loss against a recomputation from the initial checkpoint.
Lines starting with ``#`` are annotations (per-epoch validation recall).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .diagnostics import DIAGNOSTICS
from .errors import ContractViolation, TrainingAborted
from .frames import PointFrame, load_frame, preprocess_frame, save_frame
from .losses import (CircleConfig, LossWeights, TripletConfig, circle_loss,
                     triplet_loss)
from .manifest import DatasetManifest
from .model import (FramePlan, ModelConfig, PocoModel, build_plan,
                    init_model, model_forward, save_model)
from .optim import LrSchedule, adam_step, lr_at


@dataclass(frozen=True)
class TripletSpec:
    """One mined training example; ids refer to manifest frames."""

    query_id: str
    positive_id: str
    negative_ids: tuple[str, ...]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 1                  # triplets folded into one step
    negatives_per_query: int = 4
    positive_radius: float = 2.0         # meters, camera distance
    negative_radius: float = 4.0
    triplets_per_epoch: int = 0          # 0 = use every minable query
    seed: int = 0
    split: str = "train"
    lr_max: float = 1e-4
    lr_min: float = 1e-7
    weights: LossWeights = field(default_factory=LossWeights)
    circle: CircleConfig = field(default_factory=CircleConfig)
    triplet: TripletConfig = field(default_factory=TripletConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    checkpoint_every: int = 0            # steps between periodic checkpoints
    val_every: int = 0                   # epochs between val recalls (0=off)

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.negatives_per_query < 1:
            raise ContractViolation("epochs, batch_size, negatives_per_query must be >= 1")
        if self.positive_radius <= 0 or self.negative_radius <= 0:
            raise ContractViolation("mining radii must be positive")
        if self.triplets_per_epoch < 0 or self.checkpoint_every < 0 or self.val_every < 0:
            raise ContractViolation("counts must be non-negative")
        if not (0 < self.lr_min <= self.lr_max):
            raise ContractViolation("need 0 < lr_min <= lr_max")


def _scene_distance_pools(manifest: DatasetManifest, split: str,
                          positive_radius: float, negative_radius: float):
    """Per query frame: (positive candidate ids, negative candidate ids)."""
    frames = manifest.frames_for_split(split)
    if not frames:
        raise ContractViolation(f"split {split!r} has no frames")
    ids = [fr.frame_id for fr in frames]
    scene = np.array([fr.scene_id for fr in frames])
    pose = np.stack([fr.pose for fr in frames])
    diff = pose[:, None, :] - pose[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    same_scene = scene[:, None] == scene[None, :]
    eye = np.eye(len(ids), dtype=bool)
    pos_ok = same_scene & ~eye & (dist < positive_radius)
    neg_ok = ~same_scene | (same_scene & (dist > negative_radius))
    pools = []
    for i, fid in enumerate(ids):
        pools.append((fid,
                      [ids[j] for j in np.nonzero(pos_ok[i])[0]],
                      [ids[j] for j in np.nonzero(neg_ok[i])[0]]))
    return pools


def mine_triplets(manifest: DatasetManifest, split: str = "train",
                  seed: int = 0, negatives_per_query: int = 4,
                  positive_radius: float = 2.0,
                  negative_radius: float = 4.0) -> list[TripletSpec]:
    """One triplet per query frame that has a usable positive and negative.

    Positives are same-scene frames strictly within ``positive_radius`` of
    the query camera; negatives are cross-scene frames or same-scene frames
    strictly beyond ``negative_radius``.  Queries with an empty pool are
    skipped and counted under ``mining.skipped_no_positive`` /
    ``mining.skipped_no_negative``.  Negatives are drawn without
    replacement when the pool allows, with replacement otherwise.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    triplets: list[TripletSpec] = []
    for fid, pos_pool, neg_pool in _scene_distance_pools(
            manifest, split, positive_radius, negative_radius):
        if not pos_pool:
            DIAGNOSTICS.incr("mining.skipped_no_positive")
            continue
        if not neg_pool:
            DIAGNOSTICS.incr("mining.skipped_no_negative")
            continue
        positive = pos_pool[int(rng.integers(len(pos_pool)))]
        replace = len(neg_pool) < negatives_per_query
        negs = rng.choice(len(neg_pool), size=negatives_per_query,
                          replace=replace)
        triplets.append(TripletSpec(
            query_id=fid, positive_id=positive,
            negative_ids=tuple(neg_pool[int(j)] for j in negs)))
    return triplets


class FrameStore:
    """Caches preprocessed frames and per-frame computation plans.

    Preprocessing (voxel downsample to ``target_n`` + normal estimation) is
    model-independent and may be shared across model configs via
    ``cache_dir``; plans depend on the model's neighborhood/gate settings
    and are cached in memory per store.
    """

    def __init__(self, manifest: DatasetManifest, config: ModelConfig,
                 target_n: int = 2000, seed: int = 0,
                 normals_radius: float = 0.2, cache_dir: str | None = None):
        self.manifest = manifest
        self.config = config
        self.target_n = target_n
        self.seed = seed
        self.normals_radius = normals_radius
        self.cache_dir = cache_dir
        if cache_dir:
            os.makedirs(cache_dir, exist_ok=True)
        self._frames: dict[str, PointFrame] = {}
        self._plans: dict[str, FramePlan] = {}

    def _disk_path(self, frame_id: str) -> str | None:
        if not self.cache_dir:
            return None
        tag = f"{frame_id}.n{self.target_n}.s{self.seed}.r{self.normals_radius:g}.pcf"
        return os.path.join(self.cache_dir, tag)

    def frame(self, frame_id: str) -> PointFrame:
        cached = self._frames.get(frame_id)
        if cached is not None:
            return cached
        rec = self.manifest.frame_by_id(frame_id)
        disk = self._disk_path(frame_id)
        if disk and os.path.exists(disk):
            out = load_frame(disk, frame_id=rec.frame_id, scene_id=rec.scene_id)
        else:
            raw = load_frame(self.manifest.frame_path(rec),
                             frame_id=rec.frame_id, scene_id=rec.scene_id)
            viewpoint = (np.zeros(3)
                         if self.manifest.frame_coords == "sensor" else None)
            out = preprocess_frame(raw, target_n=self.target_n,
                                   radius=self.normals_radius,
                                   seed=self.seed, viewpoint=viewpoint)
            if disk:
                save_frame(disk, out)
        self._frames[frame_id] = out
        return out

    def plan(self, frame_id: str) -> FramePlan:
        cached = self._plans.get(frame_id)
        if cached is None:
            fr = self.frame(frame_id)
            cached = build_plan(fr.positions.astype(np.float64),
                                fr.normals.astype(np.float64), self.config)
            self._plans[frame_id] = cached
        return cached

    def descriptor(self, frame_id: str, model: PocoModel) -> ad.Tensor:
        return model_forward(self.frame(frame_id), model,
                             plan=self.plan(frame_id))


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, 7, epoch]).generate_state(1)[0])


def epoch_triplets(manifest: DatasetManifest, cfg: TrainConfig,
                   epoch: int) -> list[TripletSpec]:
    """The exact (mined, capped, shuffled) triplet order of one epoch.

    Exposed so tests can replay a training schedule step for step without
    running the loop.
    """
    es = _epoch_seed(cfg.seed, epoch)
    triplets = mine_triplets(manifest, cfg.split, seed=es,
                             negatives_per_query=cfg.negatives_per_query,
                             positive_radius=cfg.positive_radius,
                             negative_radius=cfg.negative_radius)
    rng = np.random.default_rng(np.random.SeedSequence([es, 1]))
    order = rng.permutation(len(triplets))
    triplets = [triplets[i] for i in order]
    if cfg.triplets_per_epoch:
        triplets = triplets[:cfg.triplets_per_epoch]
    return triplets


def batch_loss(model: PocoModel, store: FrameStore,
               batch: list[TripletSpec], cfg: TrainConfig):
    """Combined loss over a batch of triplets.

    Circle similarities are the cosines of every (query, positive) and
    (query, negative) pair in the batch; the triplet hinge is averaged per
    triplet over its negatives, then over the batch.
    """
    s_p_parts, s_n_parts, hinge_parts = [], [], []
    for trip in batch:
        g_q = store.descriptor(trip.query_id, model)
        g_p = store.descriptor(trip.positive_id, model)
        g_ns = [store.descriptor(nid, model) for nid in trip.negative_ids]
        s_p_parts.append(ad.reshape(ad.dot(g_q, g_p), (1,)))
        s_n_parts.extend(ad.reshape(ad.dot(g_q, g_n), (1,)) for g_n in g_ns)
        hinges = [triplet_loss(g_q, g_p, g_n, cfg.triplet) for g_n in g_ns]
        h = hinges[0]
        for extra in hinges[1:]:
            h = ad.add(h, extra)
        if len(hinges) > 1:
            h = ad.mul(h, ad.as_tensor(1.0 / len(hinges)))
        hinge_parts.append(h)
    s_p = ad.concat(s_p_parts, axis=0) if len(s_p_parts) > 1 else s_p_parts[0]
    s_n = ad.concat(s_n_parts, axis=0) if len(s_n_parts) > 1 else s_n_parts[0]
    l_circle = circle_loss(s_p, s_n, cfg.circle)
    l_triplet = hinge_parts[0]
    for h in hinge_parts[1:]:
        l_triplet = ad.add(l_triplet, h)
    if len(hinge_parts) > 1:
        l_triplet = ad.mul(l_triplet, ad.as_tensor(1.0 / len(hinge_parts)))
    total = ad.add(ad.mul(l_circle, ad.as_tensor(cfg.weights.w_circle)),
                   ad.mul(l_triplet, ad.as_tensor(cfg.weights.w_triplet)))
    return total, l_circle, l_triplet


@dataclass
class TrainResult:
    model: PocoModel
    steps: int
    final_checkpoint: str
    initial_checkpoint: str
    metrics_path: str
    last_loss: float


def train_loop(manifest: DatasetManifest, cfg: TrainConfig, out_dir: str,
               store: FrameStore | None = None,
               val_fn=None) -> TrainResult:
    """Run the full optimization and leave artifacts under ``out_dir``.

    Artifacts: ``checkpoint_init.pck`` (parameters as initialized),
    ``checkpoint_final.pck``, optional ``checkpoint_step<N>.pck`` every
    ``checkpoint_every`` steps, and ``metrics.log``.  A non-finite loss
    aborts with the most recent checkpoint retained on disk.

    ``val_fn(model, store) -> float`` is called every ``val_every`` epochs
    and its value recorded as a ``#`` annotation line.
    """
    os.makedirs(out_dir, exist_ok=True)
    if store is None:
        store = FrameStore(manifest, cfg.model, seed=cfg.seed)
    model = init_model(cfg.model, seed=cfg.seed)
    params = model.parameters()

    first_epoch = epoch_triplets(manifest, cfg, 0)
    if not first_epoch:
        raise ContractViolation(
            f"no minable triplets in split {cfg.split!r}; "
            "check poses and mining radii")
    steps_per_epoch = -(-len(first_epoch) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    schedule = LrSchedule(lr_max=cfg.lr_max, lr_min=cfg.lr_min,
                          total_steps=max(1, total_steps - 1))

    init_path = os.path.join(out_dir, "checkpoint_init.pck")
    save_model(init_path, model)
    last_good = init_path

    metrics_path = os.path.join(out_dir, "metrics.log")
    step = 0
    last_loss = float("nan")
    with open(metrics_path, "w", encoding="utf-8") as log:
        for epoch in range(cfg.epochs):
            triplets = first_epoch if epoch == 0 else epoch_triplets(
                manifest, cfg, epoch)
            for start in range(0, len(triplets), cfg.batch_size):
                batch = triplets[start:start + cfg.batch_size]
                total, l_circle, l_triplet = batch_loss(model, store, batch, cfg)
                lr = lr_at(schedule, step)
                values = (float(total.data), float(l_circle.data),
                          float(l_triplet.data))
                if not all(np.isfinite(values)):
                    raise TrainingAborted(
                        f"non-finite loss at step {step}; last good "
                        f"checkpoint: {last_good}")
                log.write(f"{step} {lr!r} {values[1]!r} {values[2]!r} "
                          f"{values[0]!r}\n")
                ad.backward(total)
                adam_step(params, lr)
                model.zero_grads()
                last_loss = values[0]
                step += 1
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    ck = os.path.join(out_dir, f"checkpoint_step{step}.pck")
                    save_model(ck, model)
                    last_good = ck
            if cfg.val_every and val_fn is not None and \
                    (epoch + 1) % cfg.val_every == 0:
                val = float(val_fn(model, store))
                log.write(f"# epoch {epoch} val_recall@1 {val!r}\n")
                log.flush()

    final_path = os.path.join(out_dir, "checkpoint_final.pck")
    save_model(final_path, model)
    return TrainResult(model=model, steps=step, final_checkpoint=final_path,
                       initial_checkpoint=init_path,
                       metrics_path=metrics_path, last_loss=last_loss)


def read_metrics(path: str) -> np.ndarray:
    """Parse a metrics log into an (n,5) float array, skipping annotations."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ContractViolation(f"malformed metrics line: {line!r}")
            rows.append([float(p) for p in parts])
    return np.asarray(rows, dtype=np.float64)
