"""Synthetic indoor dataset generator.

Builds a desk-scale stand-in for an RGB-D place-recognition corpus: each
scene is a rectangular room populated with colored axis-aligned boxes, a
floor rug, wall posters, and bare architectural surfaces.  A camera walks
a jittered trajectory through the room and each frame is a range- and
frustum-limited point sample of the visible surfaces with per-point color
noise.

Three properties are engineered to make retrieval non-trivial:

* every room has the same dimensions, and colored items cycle a per-room
  *permutation* of one shared palette, so neither global geometry
  statistics nor gross color histograms separate rooms; the learnable,
  viewpoint-independent cue is an antisymmetric vertical shell tint
  (lower surfaces minus a per-room color direction, upper surfaces plus
  it) plus which palette color sits on which shape where;
* a configurable number of room pairs share (near-)identical item layouts
  with independently re-drawn colors, so geometry alone cannot separate
  them;
* frames are expressed in sensor coordinates (camera at the origin,
  translation only), so absolute point positions change with the viewpoint
  while relative geometry does not.

Poses in the manifest and frame headers remain world-frame camera
positions; they drive the positive/negative/database distance rules.

Frames are written as PCF1 files without normals (normal estimation is a
preprocessing step) plus a JSON manifest.  Generation is fully driven by
`numpy.random.SeedSequence` keys derived from the config seed, so the same
config produces bit-identical trees.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .frames import PointFrame, save_frame
from .manifest import DatasetManifest, FrameRecord, SceneRecord, save_manifest

# Architectural colors shared by every room (deliberately low-texture).
# They sit near mid-gray so the shell tint below never clips at the [0, 1]
# color boundary, which would break its antisymmetry.
WALL_COLOR = (0.50, 0.50, 0.50)
FLOOR_COLOR = (0.46, 0.44, 0.42)
CEILING_COLOR = (0.54, 0.54, 0.54)

# Per-room shell tint.  Each room draws a random unit direction in RGB space
# and paints its lower wall band and floor with -TINT_AMPLITUDE times that
# direction and the upper band and ceiling with +TINT_AMPLITUDE times it.
# The antisymmetry keeps the room's mean color (and with it any first-order
# statistic a random-projection descriptor responds to) nearly unchanged,
# while a trained model can identify the room from the vertical color
# contrast, which every viewpoint in the room exposes.
TINT_AMPLITUDE = 0.42

# Every room has the same shell so that global geometry statistics (visible
# extent, wall distances) carry no room identity.
ROOM_HALF_X = 2.4
ROOM_HALF_Y = 2.4
ROOM_HEIGHT = 2.5

# Global object/poster palette; rooms differ by which entries they use and
# where, never by having private colors.
PALETTE = np.array([
    (0.85, 0.10, 0.10),   # red
    (0.10, 0.45, 0.85),   # blue
    (0.10, 0.65, 0.20),   # green
    (0.95, 0.75, 0.10),   # yellow
    (0.60, 0.20, 0.70),   # purple
    (0.95, 0.45, 0.10),   # orange
    (0.10, 0.70, 0.70),   # teal
    (0.85, 0.30, 0.55),   # pink
    (0.35, 0.25, 0.10),   # dark brown
    (0.25, 0.30, 0.60),   # slate
], dtype=np.float64)

_SPLIT_MODES = ("joint", "disjoint")


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the generator; defaults match the benchmark dataset."""

    rooms: int = 20
    frames_per_room: int = 10
    points_per_frame: int = 2000
    objects_per_room: int = 7
    seed: int = 0
    split_mode: str = "joint"           # joint: train == test == all scenes
    duplicate_geometry_pairs: int = 2   # room pairs sharing a box layout
    posters_per_room: int = 3
    step_length: float = 0.45           # trajectory spacing in meters
    camera_height: float = 1.4
    max_range: float = 4.0
    min_range: float = 0.25
    half_fov_deg: float = 65.0
    color_noise: float = 0.02

    def __post_init__(self) -> None:
        if self.rooms < 1 or self.frames_per_room < 1 or self.points_per_frame < 1:
            raise ContractViolation("rooms, frames_per_room, points_per_frame must be >= 1")
        if self.objects_per_room < 0 or self.posters_per_room < 0:
            raise ContractViolation("object/poster counts must be >= 0")
        if self.split_mode not in _SPLIT_MODES:
            raise ContractViolation(f"split_mode must be one of {_SPLIT_MODES}")
        if 2 * self.duplicate_geometry_pairs > self.rooms:
            raise ContractViolation("duplicate_geometry_pairs needs 2 rooms per pair")
        if not (0 < self.min_range < self.max_range):
            raise ContractViolation("need 0 < min_range < max_range")
        if not (0 < self.half_fov_deg < 90):
            raise ContractViolation("half_fov_deg must be in (0, 90)")

    def to_dict(self) -> dict:
        return {
            "rooms": self.rooms,
            "frames_per_room": self.frames_per_room,
            "points_per_frame": self.points_per_frame,
            "objects_per_room": self.objects_per_room,
            "seed": self.seed,
            "split_mode": self.split_mode,
            "duplicate_geometry_pairs": self.duplicate_geometry_pairs,
            "posters_per_room": self.posters_per_room,
            "step_length": self.step_length,
            "camera_height": self.camera_height,
            "max_range": self.max_range,
            "min_range": self.min_range,
            "half_fov_deg": self.half_fov_deg,
            "color_noise": self.color_noise,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        known = set(cls().to_dict())
        unknown = set(doc) - known
        if unknown:
            raise ContractViolation(f"unknown SynthConfig keys {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class _Rect:
    """One colored rectangle: origin corner plus two orthogonal edge vectors."""

    origin: tuple[float, float, float]
    edge_u: tuple[float, float, float]
    edge_v: tuple[float, float, float]
    color: tuple[float, float, float]

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.edge_u, self.edge_v)))


@dataclass
class _Room:
    scene_id: str
    half_x: float
    half_y: float
    height: float
    rects: list[_Rect] = field(default_factory=list)


def _rng(*key: int) -> np.random.Generator:
    """Deterministic generator for a structured integer key."""
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def _box_rects(center: np.ndarray, half: np.ndarray, z0: float,
               color: np.ndarray) -> list[_Rect]:
    """Five visible faces (top + 4 sides) of an upright axis-aligned box."""
    cx, cy = float(center[0]), float(center[1])
    hx, hy = float(half[0]), float(half[1])
    z1 = z0 + float(half[2]) * 2.0
    c = tuple(float(v) for v in color)
    lo = (cx - hx, cy - hy)
    rects = [
        # top
        _Rect((lo[0], lo[1], z1), (2 * hx, 0, 0), (0, 2 * hy, 0), c),
        # x- and x+ sides
        _Rect((lo[0], lo[1], z0), (0, 2 * hy, 0), (0, 0, z1 - z0), c),
        _Rect((cx + hx, lo[1], z0), (0, 2 * hy, 0), (0, 0, z1 - z0), c),
        # y- and y+ sides
        _Rect((lo[0], lo[1], z0), (2 * hx, 0, 0), (0, 0, z1 - z0), c),
        _Rect((lo[0], cy + hy, z0), (2 * hx, 0, 0), (0, 0, z1 - z0), c),
    ]
    return rects


def _build_room(scene_id: str, layout_rng: np.random.Generator,
                color_rng: np.random.Generator, cfg: SynthConfig) -> _Room:
    """Assemble a room's surface list from a layout stream and a color stream.

    Rooms in a duplicate-geometry pair are built from the same layout stream
    (same shell, boxes, rug, and poster placement) but independent color
    streams, plus a couple of centimeters of layout jitter drawn from the
    color stream so the pair is near- rather than exactly identical.

    Colored items (rug, posters, boxes) take their colors from a per-room
    random *permutation* of the shared palette, cycled in item order.  Every
    room therefore uses the palette at near-uniform frequency — raw color
    histograms are nearly useless for telling rooms apart, and what remains
    discriminative is which color sits on which shape where.
    """
    half_x, half_y, height = ROOM_HALF_X, ROOM_HALF_Y, ROOM_HEIGHT
    room = _Room(scene_id, half_x, half_y, height)

    perm = color_rng.permutation(len(PALETTE))
    item = 0

    def next_color() -> tuple[float, float, float]:
        nonlocal item
        c = PALETTE[perm[item % len(PALETTE)]]
        item += 1
        return tuple(float(v) for v in c)

    # Shell: floor, ceiling, 4 walls split into lower/upper bands carrying the
    # antisymmetric per-room tint (from the color stream, so duplicate-layout
    # pairs differ here too).  Lower band and floor get -tint, upper band and
    # ceiling +tint; the split preserves the sampled geometry exactly.
    direction = color_rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    tint = TINT_AMPLITUDE * direction

    def shaded(base, sign):
        return tuple(np.clip(np.asarray(base) + sign * tint, 0.0, 1.0))

    room.rects.append(_Rect((-half_x, -half_y, 0), (2 * half_x, 0, 0),
                            (0, 2 * half_y, 0), shaded(FLOOR_COLOR, -1.0)))
    room.rects.append(_Rect((-half_x, -half_y, height), (2 * half_x, 0, 0),
                            (0, 2 * half_y, 0), shaded(CEILING_COLOR, +1.0)))
    mid = height / 2.0
    for sign, z0, dz in ((-1.0, 0.0, mid), (+1.0, mid, height - mid)):
        band = shaded(WALL_COLOR, sign)
        room.rects.extend([
            _Rect((-half_x, -half_y, z0), (2 * half_x, 0, 0), (0, 0, dz), band),
            _Rect((-half_x, half_y, z0), (2 * half_x, 0, 0), (0, 0, dz), band),
            _Rect((-half_x, -half_y, z0), (0, 2 * half_y, 0), (0, 0, dz), band),
            _Rect((half_x, -half_y, z0), (0, 2 * half_y, 0), (0, 0, dz), band),
        ])

    # Rug: a large floor accent visible from nearly every viewpoint (the
    # camera pitches down), so each room has one strong persistent cue.
    rug_w = layout_rng.uniform(1.8, 2.6)
    rug_h = layout_rng.uniform(1.2, 2.0)
    rug_c = np.array([layout_rng.uniform(-0.5, 0.5) * (half_x - rug_w / 2 - 0.2),
                      layout_rng.uniform(-0.5, 0.5) * (half_y - rug_h / 2 - 0.2)])
    room.rects.append(_Rect((rug_c[0] - rug_w / 2, rug_c[1] - rug_h / 2, 0.01),
                            (rug_w, 0, 0), (0, rug_h, 0), next_color()))

    # Posters: large colored rectangles at eye height on the walls — the
    # main long-range cue; every room gets the same count.
    wall_choices = layout_rng.integers(0, 4, size=cfg.posters_per_room)
    for wall_idx in wall_choices:
        width, tall = layout_rng.uniform(1.4, 2.2), layout_rng.uniform(0.9, 1.4)
        along = layout_rng.uniform(0.15, 0.85)
        z0 = 0.9
        color = next_color()
        if wall_idx < 2:                      # walls parallel to x
            y = -half_y if wall_idx == 0 else half_y
            x0 = -half_x + along * (2 * half_x - width)
            room.rects.append(_Rect((x0, y, z0), (width, 0, 0), (0, 0, tall), color))
        else:                                 # walls parallel to y
            x = -half_x if wall_idx == 2 else half_x
            y0 = -half_y + along * (2 * half_y - width)
            room.rects.append(_Rect((x, y0, z0), (0, width, 0), (0, 0, tall), color))

    # Boxes: layout picks geometry, color stream picks the palette cycling
    # and the near-duplicate jitter.
    for _ in range(cfg.objects_per_room):
        half = np.array([layout_rng.uniform(0.15, 0.55),
                         layout_rng.uniform(0.15, 0.55),
                         layout_rng.uniform(0.15, 0.60)])   # half height
        center = np.array([layout_rng.uniform(-(half_x - 0.9), half_x - 0.9),
                           layout_rng.uniform(-(half_y - 0.9), half_y - 0.9)])
        center = center + color_rng.uniform(-0.02, 0.02, 2)
        room.rects.extend(_box_rects(center, half, 0.0, np.array(next_color())))
    return room


def _trajectory(room: _Room, n_frames: int, rng: np.random.Generator,
                cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Camera positions (n,3) and horizontal headings (n,) for one room.

    A jittered constant-step walk; whenever the next step would leave the
    safe interior margin the heading is re-aimed at the room center, which
    keeps consecutive frames exactly ``step_length`` apart (well inside the
    2 m positive-pair radius).
    """
    margin = 0.9
    lim_x, lim_y = room.half_x - margin, room.half_y - margin
    pos = np.array([rng.uniform(-0.4 * lim_x, 0.4 * lim_x),
                    rng.uniform(-0.4 * lim_y, 0.4 * lim_y)])
    heading = rng.uniform(0, 2 * np.pi)
    out_pos = np.empty((n_frames, 3))
    out_head = np.empty(n_frames)
    for i in range(n_frames):
        z = cfg.camera_height + np.clip(rng.normal(0, 0.05), -0.2, 0.2)
        out_pos[i] = (pos[0], pos[1], z)
        out_head[i] = heading
        step = np.array([np.cos(heading), np.sin(heading)]) * cfg.step_length
        nxt = pos + step
        if abs(nxt[0]) > lim_x or abs(nxt[1]) > lim_y:
            heading = float(np.arctan2(-pos[1], -pos[0]) + rng.normal(0, 0.2))
            step = np.array([np.cos(heading), np.sin(heading)]) * cfg.step_length
            nxt = pos + step
        pos = np.clip(nxt, (-lim_x, -lim_y), (lim_x, lim_y))
        # strong per-step heading churn: consecutive frames share a location
        # but not a view, so raw view overlap alone cannot identify the room
        heading += rng.normal(0, 0.7)
    return out_pos, out_head


def _sample_frame(room: _Room, viewpoint: np.ndarray, heading: float,
                  rng: np.random.Generator, cfg: SynthConfig,
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``points_per_frame`` surface points visible from a viewpoint.

    Candidates are drawn area-weighted across all room surfaces and kept if
    they fall inside the view cone (half-angle ``half_fov_deg`` around a
    slightly pitched-down axis) and the [min_range, max_range] band.  Draws
    escalate geometrically; any residual shortfall is filled by repeating
    accepted points, which later voxelization collapses anyway.
    """
    origins = np.array([r.origin for r in room.rects])
    edges_u = np.array([r.edge_u for r in room.rects])
    edges_v = np.array([r.edge_v for r in room.rects])
    colors = np.array([r.color for r in room.rects])
    areas = np.array([r.area for r in room.rects])
    weights = areas / areas.sum()

    pitch = np.deg2rad(12.0)
    axis = np.array([np.cos(heading) * np.cos(pitch),
                     np.sin(heading) * np.cos(pitch),
                     -np.sin(pitch)])
    cos_lim = np.cos(np.deg2rad(cfg.half_fov_deg))

    need = cfg.points_per_frame
    kept_p: list[np.ndarray] = []
    kept_c: list[np.ndarray] = []
    got = 0
    draw = 4 * need
    for _ in range(6):
        idx = rng.choice(len(room.rects), size=draw, p=weights)
        uv = rng.random((draw, 2))
        pts = origins[idx] + uv[:, :1] * edges_u[idx] + uv[:, 1:] * edges_v[idx]
        rel = pts - viewpoint
        dist = np.linalg.norm(rel, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = (rel @ axis) / np.maximum(dist, 1e-12)
        ok = (dist >= cfg.min_range) & (dist <= cfg.max_range) & (cos >= cos_lim)
        kept_p.append(pts[ok])
        kept_c.append(colors[idx[ok]])
        got += int(ok.sum())
        if got >= need:
            break
        draw *= 2
    pts = np.concatenate(kept_p) if kept_p else np.empty((0, 3))
    cols = np.concatenate(kept_c) if kept_c else np.empty((0, 3))
    if len(pts) == 0:
        raise ContractViolation(
            f"viewpoint in {room.scene_id} sees no surface; generator bug")
    if len(pts) < need:
        extra = rng.integers(0, len(pts), size=need - len(pts))
        pts = np.concatenate([pts, pts[extra]])
        cols = np.concatenate([cols, cols[extra]])
    pts, cols = pts[:need], cols[:need]
    cols = np.clip(cols + rng.normal(0, cfg.color_noise, cols.shape), 0.0, 1.0)
    return pts, cols


def _layout_key(room_idx: int, cfg: SynthConfig) -> int:
    """Rooms come in (2i, 2i+1) pairs for the first duplicate pairs; both
    members map to the even index so they share a layout stream."""
    if room_idx < 2 * cfg.duplicate_geometry_pairs:
        return room_idx - (room_idx % 2)
    return room_idx


def _splits(scene_ids: list[str], mode: str) -> dict[str, tuple[str, ...]]:
    if mode == "joint":
        all_ids = tuple(scene_ids)
        return {"train": all_ids, "val": (), "test": all_ids}
    n = len(scene_ids)
    n_test = max(1, round(0.2 * n))
    n_val = max(1, round(0.1 * n)) if n >= 3 else 0
    n_train = n - n_test - n_val
    if n_train < 1:
        raise ContractViolation(f"{n} scenes is too few for a disjoint split")
    return {
        "train": tuple(scene_ids[:n_train]),
        "val": tuple(scene_ids[n_train:n_train + n_val]),
        "test": tuple(scene_ids[n_train + n_val:]),
    }


def synth_generate(cfg: SynthConfig, out_dir: str) -> DatasetManifest:
    """Generate the dataset under ``out_dir`` and return its manifest.

    Layout on disk::

        out_dir/manifest.json
        out_dir/frames/<scene>_f<NNN>.pcf

    Frame positions are sensor-frame (camera at origin); pose_translation is
    the camera position in room coordinates and is what the distance rules
    consume.  With the default trajectory spacing every frame has at least
    one other frame of its room within 2 m (the positive-pair radius); this
    is asserted before anything is written.
    """
    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)

    scenes: list[SceneRecord] = []
    pending: list[tuple[str, PointFrame]] = []   # (relative path, frame)
    for room_idx in range(cfg.rooms):
        scene_id = f"room{room_idx:03d}"
        layout_rng = _rng(cfg.seed, 1, _layout_key(room_idx, cfg))
        color_rng = _rng(cfg.seed, 2, room_idx)
        room = _build_room(scene_id, layout_rng, color_rng, cfg)

        traj_rng = _rng(cfg.seed, 3, room_idx)
        positions, headings = _trajectory(room, cfg.frames_per_room, traj_rng, cfg)
        if cfg.frames_per_room >= 2:
            gaps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
            if gaps.max() >= 2.0:
                raise ContractViolation(
                    f"trajectory gap {gaps.max():.3f} m >= 2 m in {scene_id}")

        records = []
        for j in range(cfg.frames_per_room):
            frame_id = f"{scene_id}_f{j:03d}"
            sample_rng = _rng(cfg.seed, 4, room_idx, j)
            pts, cols = _sample_frame(room, positions[j], headings[j],
                                      sample_rng, cfg)
            frame = PointFrame(
                frame_id=frame_id, scene_id=scene_id,
                colors=cols.astype(np.float32),
                # sensor coordinates: camera at the origin (translation only)
                positions=(pts - positions[j]).astype(np.float32),
                pose_translation=positions[j].astype(np.float32),
                normals=None)
            rel = os.path.join("frames", f"{frame_id}.pcf")
            pending.append((rel, frame))
            records.append(FrameRecord(
                frame_id=frame_id, scene_id=scene_id, path=rel,
                pose_translation=tuple(float(v) for v in frame.pose_translation)))
        scenes.append(SceneRecord(scene_id=scene_id, frames=tuple(records)))

    manifest = DatasetManifest(
        scenes=tuple(scenes),
        splits=_splits([s.scene_id for s in scenes], cfg.split_mode),
        root=out_dir,
        frame_coords="sensor")
    manifest.validate()

    for rel, frame in pending:
        save_frame(os.path.join(out_dir, rel), frame)
    save_manifest(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def manifest_path(out_dir: str) -> str:
    return os.path.join(out_dir, "manifest.json")
