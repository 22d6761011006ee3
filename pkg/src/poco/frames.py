"""Colorized point-cloud frames: container, binary I/O, preprocessing.

Frame file format PCF1 (little-endian):

    magic  4 bytes  b"PCF1"
    flags  u8       bit 0: normals present
    n      u32      point count
    pose   3 * f32  sensor/camera position in world coordinates
    n records, each f32: r g b x y z [nx ny nz]

Colors are in [0, 1]; positions are meters in the world frame. Arrays are
float32 in memory and on disk; all geometry math upcasts to float64.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from poco.diagnostics import DIAGNOSTICS
from poco.errors import ContractViolation, FormatError
from poco.geometry import unit_orthogonal

_MAGIC = b"PCF1"
_FLAG_NORMALS = 0x01


@dataclass
class PointFrame:
    """One capture: per-point colors/positions (+ optional unit normals) and pose."""

    frame_id: str
    scene_id: str
    colors: np.ndarray            # (n, 3) float32, values in [0, 1]
    positions: np.ndarray         # (n, 3) float32, meters
    pose_translation: np.ndarray  # (3,) float32, camera position
    normals: np.ndarray | None = None  # (n, 3) float32 unit vectors, or None

    def __post_init__(self) -> None:
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float32)
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float32)
        self.pose_translation = np.asarray(self.pose_translation, dtype=np.float32).reshape(3)
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float32)
        self.validate()

    @property
    def n(self) -> int:
        return int(self.positions.shape[0])

    def validate(self) -> None:
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ContractViolation(f"positions must be (n, 3), got {self.positions.shape}")
        if self.colors.shape != self.positions.shape:
            raise ContractViolation(
                f"colors shape {self.colors.shape} != positions shape {self.positions.shape}")
        if self.normals is not None:
            if self.normals.shape != self.positions.shape:
                raise ContractViolation(
                    f"normals shape {self.normals.shape} != positions shape {self.positions.shape}")
            norms = np.linalg.norm(self.normals.astype(np.float64), axis=1)
            if norms.size and float(np.max(np.abs(norms - 1.0))) > 1e-3:
                raise ContractViolation("normals must be unit length")
        if not np.isfinite(self.positions).all() or not np.isfinite(self.colors).all():
            raise ContractViolation("frame contains non-finite values")
        if self.colors.size and (self.colors.min() < -1e-6 or self.colors.max() > 1.0 + 1e-6):
            raise ContractViolation("colors must lie in [0, 1]")


def save_frame(path, frame: PointFrame) -> None:
    flags = _FLAG_NORMALS if frame.normals is not None else 0
    header = _MAGIC + struct.pack("<BI", flags, frame.n) + frame.pose_translation.astype("<f4").tobytes()
    cols = [frame.colors, frame.positions]
    if frame.normals is not None:
        cols.append(frame.normals)
    records = np.concatenate(cols, axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records.tobytes())


def load_frame(path, frame_id: str | None = None, scene_id: str = "") -> PointFrame:
    """Read a PCF1 file. frame_id defaults to the file stem."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 21:
        raise FormatError(f"frame file too short ({len(buf)} bytes) at offset 0: {path}")
    if buf[:4] != _MAGIC:
        raise FormatError(f"bad frame magic at offset 0: {path}")
    flags, n = struct.unpack_from("<BI", buf, 4)
    if flags & ~_FLAG_NORMALS:
        raise FormatError(f"unknown flag bits 0x{flags:02x} at offset 4: {path}")
    pose = np.frombuffer(buf, dtype="<f4", count=3, offset=9)
    width = 9 if flags & _FLAG_NORMALS else 6
    expect = 21 + 4 * width * n
    if len(buf) != expect:
        raise FormatError(
            f"frame payload size mismatch at offset 21: expected {expect} bytes, got {len(buf)}: {path}")
    records = np.frombuffer(buf, dtype="<f4", offset=21).reshape(n, width)
    if frame_id is None:
        frame_id = os.path.splitext(os.path.basename(str(path)))[0]
    try:
        return PointFrame(
            frame_id=frame_id,
            scene_id=scene_id,
            colors=records[:, 0:3],
            positions=records[:, 3:6],
            normals=records[:, 6:9] if width == 9 else None,
            pose_translation=pose,
        )
    except ContractViolation as e:
        raise FormatError(f"frame payload invalid in {path}: {e}") from e


def frame_seed(frame_id: str, seed: int) -> int:
    """Stable per-frame RNG seed (independent of processing order)."""
    return (zlib.crc32(frame_id.encode("utf-8")) ^ (seed & 0xFFFFFFFF)) & 0xFFFFFFFF


def _voxel_count(ids: np.ndarray) -> int:
    order = np.lexsort((ids[:, 2], ids[:, 1], ids[:, 0]))
    s = ids[order]
    if s.shape[0] == 0:
        return 0
    return 1 + int(np.any(s[1:] != s[:-1], axis=1).sum())


def voxel_downsample(frame: PointFrame, target_n: int = 2000, seed: int = 0) -> PointFrame:
    """Reduce a frame to exactly target_n points via adaptive voxel grids.

    Binary-searches the voxel edge length for the smallest occupied-voxel
    count >= target_n, replaces each voxel with its centroid (mean position
    and color), then seeds a uniform subsample down to exactly target_n.
    Frames with fewer than target_n distinct points are padded by sampling
    existing points with replacement. Normals are dropped (means of normals
    are not unit vectors); run estimate_normals afterwards.
    """
    if target_n < 1:
        raise ContractViolation(f"target_n must be >= 1, got {target_n}")
    if frame.n == 0:
        raise ContractViolation("cannot downsample an empty frame")
    rng = np.random.default_rng(frame_seed(frame.frame_id, seed))
    pos = frame.positions.astype(np.float64)
    col = frame.colors.astype(np.float64)
    mn = pos.min(axis=0)

    lo = 1e-9  # below float32 resolution: every distinct point gets its own voxel
    hi = max(float((pos.max(axis=0) - mn).max()), lo) * 2.0 + 1e-6

    def ids_at(edge: float) -> np.ndarray:
        return np.floor((pos - mn) / edge).astype(np.int64)

    n_distinct = _voxel_count(ids_at(lo))
    if n_distinct < target_n:
        # Duplicate-heavy or small frame: keep every distinct point, pad below.
        best_edge = lo
    else:
        best_edge = lo
        # log-space bisection: count(edge) is ~monotone decreasing in edge
        for _ in range(60):
            mid = float(np.sqrt(lo * hi))
            if _voxel_count(ids_at(mid)) >= target_n:
                best_edge = mid
                lo = mid
            else:
                hi = mid

    ids = ids_at(best_edge)
    uniq, inverse = np.unique(ids, axis=0, return_inverse=True)
    k = uniq.shape[0]
    counts = np.bincount(inverse, minlength=k).astype(np.float64)
    cent = np.empty((k, 3))
    cmean = np.empty((k, 3))
    for j in range(3):
        cent[:, j] = np.bincount(inverse, weights=pos[:, j], minlength=k) / counts
        cmean[:, j] = np.bincount(inverse, weights=col[:, j], minlength=k) / counts

    if k >= target_n:
        pick = np.sort(rng.choice(k, size=target_n, replace=False))
        out_pos, out_col = cent[pick], cmean[pick]
    else:
        DIAGNOSTICS.incr("voxel.padded")
        pad = rng.integers(0, k, size=target_n - k)
        out_pos = np.concatenate([cent, cent[pad]], axis=0)
        out_col = np.concatenate([cmean, cmean[pad]], axis=0)

    return PointFrame(
        frame_id=frame.frame_id,
        scene_id=frame.scene_id,
        colors=np.clip(out_col, 0.0, 1.0),
        positions=out_pos,
        pose_translation=frame.pose_translation,
        normals=None,
    )


def estimate_normals(frame: PointFrame, radius: float = 0.2,
                     viewpoint: np.ndarray | None = None) -> PointFrame:
    """Attach per-point unit normals from local covariance analysis.

    Neighborhood = all points within `radius`; if that yields < 3 points the
    8 nearest neighbors are used instead. The normal is the eigenvector of
    the neighborhood covariance with the smallest eigenvalue, oriented to
    face the viewpoint (default: the frame's pose translation). Degenerate
    neighborhoods (rank < 2) fall back to a deterministic axis-priority
    vector orthogonal to the dominant direction.
    """
    if frame.n < 3:
        raise ContractViolation(f"normal estimation needs >= 3 points, got {frame.n}")
    pos = frame.positions.astype(np.float64)
    n = pos.shape[0]
    vp = frame.pose_translation.astype(np.float64) if viewpoint is None \
        else np.asarray(viewpoint, dtype=np.float64).reshape(3)

    tree = cKDTree(pos)
    neighbor_lists = tree.query_ball_point(pos, r=radius)
    covs = np.empty((n, 3, 3))
    k_fallback = min(8, n)
    for i, idx in enumerate(neighbor_lists):
        if len(idx) < 3:
            DIAGNOSTICS.incr("normals.knn_fallback")
            _, idx = tree.query(pos[i], k=k_fallback)
        pts = pos[idx]
        d = pts - pts.mean(axis=0)
        covs[i] = d.T @ d / len(idx)

    w, v = np.linalg.eigh(covs)       # ascending eigenvalues; columns are eigenvectors
    normals = v[:, :, 0].copy()
    scale = np.maximum(w[:, 2], 1e-30)
    degenerate = w[:, 1] / scale < 1e-9
    if degenerate.any():
        DIAGNOSTICS.incr("normals.degenerate", int(degenerate.sum()))
        flat = w[:, 2] < 1e-18        # all points coincident: no dominant direction
        dom = v[:, :, 2]
        normals[degenerate] = unit_orthogonal(dom[degenerate])
        normals[degenerate & flat] = (0.0, 0.0, 1.0)

    # orient toward viewpoint; exact ties get a canonical sign
    side = ((vp[None, :] - pos) * normals).sum(axis=1)
    normals[side < 0] *= -1.0
    tied = side == 0
    if tied.any():
        lead = normals[tied]
        first_nz = np.argmax(np.abs(lead) > 0, axis=1)
        sign = np.sign(lead[np.arange(lead.shape[0]), first_nz])
        normals[tied] = lead * np.where(sign == 0, 1.0, sign)[:, None]

    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return replace(frame, normals=normals.astype(np.float32))


def preprocess_frame(frame: PointFrame, target_n: int = 2000, radius: float = 0.2,
                     seed: int = 0,
                     viewpoint: np.ndarray | None = None) -> PointFrame:
    """voxel_downsample then estimate_normals — the standard network input prep.

    viewpoint overrides the normal-orientation reference; leave None for
    world-frame clouds (the camera pose), pass (0, 0, 0) for sensor-frame
    clouds (the camera is the origin).
    """
    return estimate_normals(voxel_downsample(frame, target_n=target_n, seed=seed),
                            radius=radius, viewpoint=viewpoint)
