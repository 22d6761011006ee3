"""Descriptor index, cosine-ranked querying, and Recall@K evaluation.

The index is an immutable collection of (frame_id, scene_id, pose,
descriptor) entries with a binary persistence format (PDB1).  Database
frames are chosen per scene by a greedy 3 m spacing sweep; every other
frame becomes a query.  A query is "matched" at rank k when any of its
top-k database hits is a same-scene frame whose camera lies within the
match radius — descriptors decide the ranking, poses only the ground
truth.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .diagnostics import DIAGNOSTICS
from .errors import ContractViolation, FormatError
from .manifest import DatasetManifest, SceneRecord

_MAGIC = b"PDB1"


@dataclass(frozen=True)
class IndexEntry:
    frame_id: str
    scene_id: str
    pose_translation: tuple[float, float, float]
    descriptor: np.ndarray          # (dim,) float32, unit norm

    @property
    def pose(self) -> np.ndarray:
        return np.asarray(self.pose_translation, dtype=np.float64)


class DescriptorIndex:
    """Immutable set of enrolled descriptors with cached matrix views."""

    def __init__(self, entries: list[IndexEntry] | tuple[IndexEntry, ...]):
        if not entries:
            raise ContractViolation("index needs at least one entry")
        dims = {e.descriptor.shape for e in entries}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ContractViolation(f"descriptor shapes inconsistent: {dims}")
        ids = [e.frame_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ContractViolation("duplicate frame_ids in index")
        mat = np.stack([np.asarray(e.descriptor, dtype=np.float64)
                        for e in entries])
        norms = np.linalg.norm(mat, axis=1)
        worst = float(np.abs(norms - 1.0).max())
        if worst > 1e-4:
            raise ContractViolation(
                f"descriptors must be unit norm within 1e-4; worst |n-1| = {worst:g}")
        self.entries: tuple[IndexEntry, ...] = tuple(entries)
        self._matrix = mat                      # (n, dim) float64
        self._ids = np.array(ids)
        self.dim = int(mat.shape[1])

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    ranked: tuple[tuple[str, float], ...]   # (frame_id, cosine) descending


def select_database(scene: SceneRecord,
                    spacing: float = 3.0) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Partition a scene's frame ids into (database, queries).

    Greedy sweep in manifest order: a frame joins the database iff it lies
    at least ``spacing`` meters from every database frame selected so far;
    the first frame always joins.  Consequently every query is within
    ``spacing`` of some database frame of its scene.
    """
    if not scene.frames:
        raise ContractViolation(f"scene {scene.scene_id!r} has no frames")
    db_ids: list[str] = []
    db_pos: list[np.ndarray] = []
    queries: list[str] = []
    for fr in scene.frames:
        pose = fr.pose
        if not db_pos or min(float(np.linalg.norm(pose - p)) for p in db_pos) >= spacing:
            db_ids.append(fr.frame_id)
            db_pos.append(pose)
        else:
            queries.append(fr.frame_id)
    return tuple(db_ids), tuple(queries)


def entry_for_frame(store, frame_id: str, model) -> IndexEntry:
    """Compute one enrollment entry via the full model forward."""
    frame = store.frame(frame_id)
    desc = store.descriptor(frame_id, model)
    return IndexEntry(
        frame_id=frame.frame_id, scene_id=frame.scene_id,
        pose_translation=tuple(float(v) for v in frame.pose_translation),
        descriptor=np.asarray(desc.data, dtype=np.float32))


def build_index(store, frame_ids, model) -> DescriptorIndex:
    """One descriptor per frame id, in the given order."""
    entries = [entry_for_frame(store, fid, model) for fid in frame_ids]
    idx = DescriptorIndex(entries)
    if idx.dim != model.config.descriptor_dim:
        raise ContractViolation(
            f"index dim {idx.dim} != model descriptor_dim "
            f"{model.config.descriptor_dim}")
    return idx


def save_index(path, index: DescriptorIndex) -> None:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", len(index), index.dim))
    for e in index.entries:
        fid = e.frame_id.encode("utf-8")
        sid = e.scene_id.encode("utf-8")
        buf.write(struct.pack("<H", len(fid)))
        buf.write(fid)
        buf.write(struct.pack("<H", len(sid)))
        buf.write(sid)
        buf.write(np.asarray(e.pose_translation, dtype="<f4").tobytes())
        buf.write(np.asarray(e.descriptor, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_index(path) -> DescriptorIndex:
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise FormatError(
                f"{path}: truncated reading {what} at offset {off}")
        out = blob[off:off + n]
        off += n
        return out

    if take(4, "magic") != _MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0, want PDB1")
    count, dim = struct.unpack("<II", take(8, "header"))
    entries = []
    for i in range(count):
        (id_len,) = struct.unpack("<H", take(2, f"entry {i} id length"))
        fid = take(id_len, f"entry {i} id").decode("utf-8")
        (sc_len,) = struct.unpack("<H", take(2, f"entry {i} scene length"))
        sid = take(sc_len, f"entry {i} scene").decode("utf-8")
        pose = np.frombuffer(take(12, f"entry {i} pose"), dtype="<f4")
        desc = np.frombuffer(take(4 * dim, f"entry {i} descriptor"),
                             dtype="<f4").copy()
        entries.append(IndexEntry(
            frame_id=fid, scene_id=sid,
            pose_translation=tuple(float(v) for v in pose),
            descriptor=desc))
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes at offset {off}")
    return DescriptorIndex(entries)


def query(index: DescriptorIndex, descriptor: np.ndarray,
          top_k: int = 3, query_id: str = "") -> RetrievalResult:
    """Exact cosine ranking of the whole index, top_k kept.

    Ties are broken by ascending frame_id; asking for more entries than the
    index holds returns the full ranking and bumps ``query.topk_clamped``.
    """
    d = np.asarray(descriptor, dtype=np.float64).reshape(-1)
    if d.shape[0] != index.dim:
        raise ContractViolation(
            f"query dim {d.shape[0]} != index dim {index.dim}")
    nrm = float(np.linalg.norm(d))
    if nrm <= 0:
        raise ContractViolation("query descriptor has zero norm")
    sims = index.matrix @ (d / nrm)
    if top_k > len(index):
        DIAGNOSTICS.incr("query.topk_clamped")
        top_k = len(index)
    if top_k < 1:
        raise ContractViolation("top_k must be >= 1")
    order = np.lexsort((index._ids, -sims))[:top_k]
    ranked = tuple((str(index._ids[i]), float(sims[i])) for i in order)
    return RetrievalResult(query_id=query_id, ranked=ranked)


@dataclass(frozen=True)
class QueryEntry:
    """Ground-truth side of one evaluation query."""

    frame_id: str
    scene_id: str
    pose_translation: tuple[float, float, float]
    descriptor: np.ndarray

    @property
    def pose(self) -> np.ndarray:
        return np.asarray(self.pose_translation, dtype=np.float64)


@dataclass(frozen=True)
class RecallTable:
    ks: tuple[int, ...]
    recalls: tuple[float, ...]
    matched: tuple[int, ...]
    total_queries: int

    def at(self, k: int) -> float:
        return self.recalls[self.ks.index(k)]

    def as_text(self) -> str:
        lines = [f"{'k':>4}  {'recall':>8}  {'matched':>8}  {'queries':>8}"]
        for k, r, m in zip(self.ks, self.recalls, self.matched):
            lines.append(f"{k:>4}  {r:>8.4f}  {m:>8}  {self.total_queries:>8}")
        return "\n".join(lines)

    def as_csv(self) -> str:
        lines = ["k,recall,matched,queries"]
        for k, r, m in zip(self.ks, self.recalls, self.matched):
            lines.append(f"{k},{r!r},{m},{self.total_queries}")
        return "\n".join(lines) + "\n"


def _match_mask(index: DescriptorIndex, q: QueryEntry,
                match_radius: float) -> np.ndarray:
    same = np.array([e.scene_id == q.scene_id for e in index.entries])
    dist = np.linalg.norm(
        np.stack([e.pose for e in index.entries]) - q.pose, axis=1)
    return same & (dist <= match_radius)


def evaluate_recall(index: DescriptorIndex, queries: list[QueryEntry],
                    ks: tuple[int, ...] = (1, 2, 3),
                    match_radius: float = 3.0) -> RecallTable:
    """Recall@k over the query set against a joint cross-scene index."""
    if not queries:
        raise ContractViolation("evaluate_recall needs at least one query")
    if any(k < 1 for k in ks) or list(ks) != sorted(set(ks)):
        raise ContractViolation(f"ks must be unique ascending positives, got {ks}")
    kmax = min(max(ks), len(index))
    matched = np.zeros(len(ks), dtype=np.int64)
    for q in queries:
        res = query(index, q.descriptor, top_k=kmax, query_id=q.frame_id)
        good = _match_mask(index, q, match_radius)
        id_to_good = {e.frame_id: bool(g) for e, g in zip(index.entries, good)}
        hit_rank = None
        for rank, (fid, _) in enumerate(res.ranked):
            if id_to_good[fid]:
                hit_rank = rank
                break
        if hit_rank is not None:
            for j, k in enumerate(ks):
                if hit_rank < k:
                    matched[j] += 1
    recalls = tuple(float(m) / len(queries) for m in matched)
    return RecallTable(ks=tuple(ks), recalls=recalls,
                       matched=tuple(int(m) for m in matched),
                       total_queries=len(queries))


def chance_recall(index: DescriptorIndex, queries: list[QueryEntry],
                  ks: tuple[int, ...] = (1, 2, 3),
                  match_radius: float = 3.0) -> tuple[float, ...]:
    """Analytic recall of a uniformly random ranking.

    For a query with m valid matches in an index of N entries, the chance
    that a uniform random top-k contains at least one match is
    1 - C(N-m, k) / C(N, k); the table entry is the mean over queries.
    """
    if not queries:
        raise ContractViolation("chance_recall needs at least one query")
    N = len(index)
    out = []
    for k in ks:
        kk = min(k, N)
        acc = 0.0
        for q in queries:
            m = int(_match_mask(index, q, match_radius).sum())
            miss = 1.0
            for i in range(kk):
                miss *= max(0.0, (N - m - i)) / (N - i)
            acc += 1.0 - miss
        out.append(acc / len(queries))
    return tuple(out)


def run_place_recognition_eval(manifest: DatasetManifest, split: str,
                               model, store,
                               ks: tuple[int, ...] = (1, 2, 3),
                               match_radius: float = 3.0,
                               spacing: float = 3.0):
    """Full protocol: per-scene database selection, joint index, recall.

    Returns (RecallTable, DescriptorIndex, list[QueryEntry]).
    """
    scenes = manifest.scenes_for_split(split)
    if not scenes:
        raise ContractViolation(f"split {split!r} has no scenes")
    db_ids: list[str] = []
    query_ids: list[str] = []
    for scene in scenes:
        db, qs = select_database(scene, spacing=spacing)
        db_ids.extend(db)
        query_ids.extend(qs)
    index = build_index(store, db_ids, model)
    queries = []
    for fid in query_ids:
        e = entry_for_frame(store, fid, model)
        queries.append(QueryEntry(e.frame_id, e.scene_id,
                                  e.pose_translation, e.descriptor))
    table = evaluate_recall(index, queries, ks=ks, match_radius=match_radius)
    return table, index, queries
