"""Tests for database selection, cosine ranking, recall evaluation, PDB1 I/O."""

import struct
from types import SimpleNamespace

import numpy as np
import pytest

from poco.diagnostics import DIAGNOSTICS
from poco.errors import ContractViolation, FormatError
from poco.manifest import FrameRecord, SceneRecord
from poco.retrieval import (DescriptorIndex, IndexEntry, QueryEntry,
                            RecallTable, build_index, chance_recall,
                            evaluate_recall, load_index, query, save_index,
                            select_database)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def make_entries(n, dim=8, seed=0, scene="s0", prefix="f"):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        out.append(IndexEntry(
            frame_id=f"{prefix}{i:03d}", scene_id=scene,
            pose_translation=tuple(rng.uniform(-5, 5, 3)),
            descriptor=unit(rng.normal(size=dim)).astype(np.float32)))
    return out


def scene_with_poses(poses, scene_id="s0"):
    frames = tuple(
        FrameRecord(frame_id=f"{scene_id}_f{i:03d}", scene_id=scene_id,
                    path=f"frames/{scene_id}_f{i:03d}.pcf",
                    pose_translation=tuple(map(float, p)))
        for i, p in enumerate(poses))
    return SceneRecord(scene_id=scene_id, frames=frames)


class TestDescriptorIndex:
    def test_requires_entries(self):
        with pytest.raises(ContractViolation):
            DescriptorIndex([])

    def test_rejects_mixed_dims(self):
        a = make_entries(1, dim=4)[0]
        b = make_entries(2, dim=8, prefix="g")[1]
        with pytest.raises(ContractViolation):
            DescriptorIndex([a, b])

    def test_rejects_duplicate_ids(self):
        a = make_entries(1, seed=1)[0]
        b = make_entries(1, seed=2)[0]
        with pytest.raises(ContractViolation, match="duplicate"):
            DescriptorIndex([a, b])

    def test_rejects_non_unit_descriptors(self):
        e = IndexEntry("f0", "s0", (0.0, 0.0, 0.0),
                       np.full(4, 0.7, dtype=np.float32))
        with pytest.raises(ContractViolation, match="unit norm"):
            DescriptorIndex([e])

    def test_matrix_is_float64_and_ordered(self):
        entries = make_entries(5)
        idx = DescriptorIndex(entries)
        assert idx.matrix.dtype == np.float64
        assert idx.dim == 8
        assert len(idx) == 5
        np.testing.assert_allclose(
            idx.matrix[2], entries[2].descriptor.astype(np.float64), atol=1e-7)


class TestSelectDatabase:
    def test_greedy_spacing_on_a_line(self):
        poses = [(0, 0, 0), (1, 0, 0), (2.5, 0, 0), (3.5, 0, 0), (6.6, 0, 0)]
        db, qs = select_database(scene_with_poses(poses), spacing=3.0)
        assert db == ("s0_f000", "s0_f003", "s0_f004")
        assert qs == ("s0_f001", "s0_f002")

    def test_zero_spacing_enrolls_everything(self):
        poses = [(0, 0, 0), (0.1, 0, 0), (0.2, 0, 0)]
        db, qs = select_database(scene_with_poses(poses), spacing=0.0)
        assert len(db) == 3 and qs == ()

    def test_one_meter_spacing(self):
        poses = [(0, 0, 0), (0.5, 0, 0), (1.2, 0, 0), (1.9, 0, 0)]
        db, qs = select_database(scene_with_poses(poses), spacing=1.0)
        assert db == ("s0_f000", "s0_f002")
        assert qs == ("s0_f001", "s0_f003")

    def test_first_frame_always_database(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            scene = scene_with_poses(rng.uniform(-4, 4, (8, 3)))
            db, _ = select_database(scene, spacing=5.0)
            assert db[0] == "s0_f000"

    def test_matches_independent_greedy_oracle(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            poses = rng.uniform(-6, 6, (12, 3))
            scene = scene_with_poses(poses)
            spacing = float(rng.uniform(0.5, 8.0))
            db, qs = select_database(scene, spacing=spacing)
            odb, oqs = [], []
            kept = []
            for i, p in enumerate(poses):
                if not kept or min(np.linalg.norm(p - poses[j])
                                   for j in kept) >= spacing:
                    kept.append(i)
                    odb.append(f"s0_f{i:03d}")
                else:
                    oqs.append(f"s0_f{i:03d}")
            assert list(db) == odb and list(qs) == oqs

    def test_queries_near_some_database_frame(self):
        rng = np.random.default_rng(3)
        poses = rng.uniform(-5, 5, (15, 3))
        scene = scene_with_poses(poses)
        db, qs = select_database(scene, spacing=3.0)
        id_to_pose = {f.frame_id: np.asarray(f.pose_translation)
                      for f in scene.frames}
        for q in qs:
            dmin = min(np.linalg.norm(id_to_pose[q] - id_to_pose[d]) for d in db)
            assert dmin < 3.0

    def test_empty_scene_rejected(self):
        with pytest.raises(ContractViolation):
            select_database(SceneRecord(scene_id="s0", frames=()))


class TestQuery:
    def test_matches_full_sort_oracle(self):
        for seed in range(30):
            rng = np.random.default_rng(seed)
            idx = DescriptorIndex(make_entries(20, dim=6, seed=seed))
            d = unit(rng.normal(size=6))
            res = query(idx, d, top_k=20)
            sims = idx.matrix @ d
            oracle = sorted(zip([e.frame_id for e in idx.entries], sims),
                            key=lambda t: (-t[1], t[0]))
            assert [fid for fid, _ in res.ranked] == [fid for fid, _ in oracle]
            np.testing.assert_allclose([s for _, s in res.ranked],
                                       [s for _, s in oracle], atol=1e-12)

    def test_ties_break_by_ascending_frame_id(self):
        d = unit([1.0, 1.0])
        entries = [
            IndexEntry("zzz", "s", (0, 0, 0), d.astype(np.float32)),
            IndexEntry("aaa", "s", (0, 0, 0), d.astype(np.float32)),
            IndexEntry("mmm", "s", (0, 0, 0), d.astype(np.float32)),
        ]
        res = query(DescriptorIndex(entries), d, top_k=3)
        assert [fid for fid, _ in res.ranked] == ["aaa", "mmm", "zzz"]

    def test_query_is_normalized_before_ranking(self):
        idx = DescriptorIndex(make_entries(5, dim=4, seed=9))
        d = np.array([2.0, 0.0, 0.0, 0.0])
        res = query(idx, d, top_k=1)
        want = float((idx.matrix @ np.array([1.0, 0, 0, 0])).max())
        assert res.ranked[0][1] == pytest.approx(want, abs=1e-12)

    def test_top_k_clamped_with_diagnostic(self):
        DIAGNOSTICS.reset()
        idx = DescriptorIndex(make_entries(3, dim=4))
        res = query(idx, unit(np.ones(4)), top_k=10)
        assert len(res.ranked) == 3
        assert DIAGNOSTICS.count("query.topk_clamped") == 1

    def test_bad_inputs_rejected(self):
        idx = DescriptorIndex(make_entries(3, dim=4))
        with pytest.raises(ContractViolation):
            query(idx, np.ones(5))
        with pytest.raises(ContractViolation):
            query(idx, np.zeros(4))
        with pytest.raises(ContractViolation):
            query(idx, unit(np.ones(4)), top_k=0)


class TestEvaluateRecall:
    def _tiny_world(self):
        # two db entries in different scenes at the origin of each scene
        e_a = IndexEntry("a_db", "A", (0, 0, 0),
                         unit([1, 0, 0]).astype(np.float32))
        e_b = IndexEntry("b_db", "B", (0, 0, 0),
                         unit([0, 1, 0]).astype(np.float32))
        return DescriptorIndex([e_a, e_b])

    def test_rank_one_hit(self):
        idx = self._tiny_world()
        q = QueryEntry("qa", "A", (1.0, 0, 0), unit([1, 0.1, 0]))
        table = evaluate_recall(idx, [q])
        assert table.recalls == (1.0, 1.0, 1.0)

    def test_rank_two_hit(self):
        idx = self._tiny_world()
        q = QueryEntry("qa", "A", (1.0, 0, 0), unit([0.1, 1, 0]))
        table = evaluate_recall(idx, [q])
        assert table.recalls == (0.0, 1.0, 1.0)
        assert table.matched == (0, 1, 1)

    def test_same_scene_but_too_far_is_no_match(self):
        idx = self._tiny_world()
        q = QueryEntry("qa", "A", (10.0, 0, 0), unit([1, 0, 0]))
        table = evaluate_recall(idx, [q], match_radius=3.0)
        assert table.recalls == (0.0, 0.0, 0.0)

    def test_wrong_scene_within_radius_is_no_match(self):
        idx = self._tiny_world()
        q = QueryEntry("qc", "C", (0.0, 0, 0), unit([1, 0, 0]))
        table = evaluate_recall(idx, [q])
        assert table.recalls == (0.0, 0.0, 0.0)

    def test_recall_monotone_in_k_on_random_instances(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            entries = []
            for s in range(4):
                entries += make_entries(5, dim=6, seed=seed * 10 + s,
                                        scene=f"s{s}", prefix=f"s{s}f")
            idx = DescriptorIndex(entries)
            queries = [QueryEntry(f"q{i}", f"s{rng.integers(4)}",
                                  tuple(rng.uniform(-5, 5, 3)),
                                  unit(rng.normal(size=6)))
                       for i in range(10)]
            t = evaluate_recall(idx, queries, ks=(1, 2, 3))
            assert t.recalls[0] <= t.recalls[1] <= t.recalls[2]

    def test_ks_validation(self):
        idx = self._tiny_world()
        q = QueryEntry("q", "A", (0, 0, 0), unit([1, 0, 0]))
        for bad in ((0, 1), (2, 1), (1, 1, 2)):
            with pytest.raises(ContractViolation):
                evaluate_recall(idx, [q], ks=bad)
        with pytest.raises(ContractViolation):
            evaluate_recall(idx, [])

    def test_table_formatting(self):
        t = RecallTable(ks=(1, 3), recalls=(0.5, 0.75), matched=(2, 3),
                        total_queries=4)
        assert t.at(3) == 0.75
        text = t.as_text()
        assert "0.5000" in text and "0.7500" in text
        csv = t.as_csv()
        assert csv.splitlines()[0] == "k,recall,matched,queries"
        assert "1,0.5,2,4" in csv


class TestChanceRecall:
    def test_closed_form_small_case(self):
        entries = make_entries(4, dim=4, scene="A")
        idx = DescriptorIndex(entries)
        pose = entries[0].pose_translation
        q = QueryEntry("q", "A", pose, unit(np.ones(4)))
        # exactly one valid match among 4 entries (radius tightened to hit
        # only the first entry)
        dists = sorted(np.linalg.norm(np.asarray(e.pose_translation) -
                                      np.asarray(pose)) for e in entries)
        radius = (dists[0] + dists[1]) / 2
        got = chance_recall(idx, [q], ks=(1, 2, 3), match_radius=radius)
        want = (1 / 4, 1 - (3 / 6), 1 - (1 / 4))
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_agrees_with_random_descriptor_monte_carlo(self):
        rng = np.random.default_rng(0)
        entries = []
        for s in range(2):
            entries += make_entries(5, dim=16, seed=s, scene=f"s{s}",
                                    prefix=f"s{s}f")
        idx = DescriptorIndex(entries)
        queries = [QueryEntry(f"q{i}", f"s{i % 2}",
                              entries[(i % 2) * 5].pose_translation,
                              unit(rng.normal(size=16)))
                   for i in range(6)]
        analytic = chance_recall(idx, queries, ks=(1,), match_radius=4.0)[0]
        trials = []
        for t in range(60):
            rnd = [QueryEntry(q.frame_id, q.scene_id, q.pose_translation,
                              unit(rng.normal(size=16))) for q in queries]
            trials.append(evaluate_recall(idx, rnd, ks=(1,),
                                          match_radius=4.0).recalls[0])
        assert abs(np.mean(trials) - analytic) < 0.12

    def test_needs_queries(self):
        idx = DescriptorIndex(make_entries(2))
        with pytest.raises(ContractViolation):
            chance_recall(idx, [])


class TestIndexIO:
    def test_round_trip(self, tmp_path):
        entries = make_entries(6, dim=8, seed=4, scene="roomA")
        idx = DescriptorIndex(entries)
        path = tmp_path / "db.pdb"
        save_index(path, idx)
        again = load_index(path)
        assert len(again) == 6
        for a, b in zip(idx.entries, again.entries):
            assert a.frame_id == b.frame_id
            assert a.scene_id == b.scene_id
            np.testing.assert_allclose(a.pose_translation, b.pose_translation,
                                       atol=1e-6)
            np.testing.assert_array_equal(a.descriptor, b.descriptor)

    def test_second_save_is_byte_identical(self, tmp_path):
        idx = DescriptorIndex(make_entries(4, dim=8, seed=5))
        p1, p2 = tmp_path / "a.pdb", tmp_path / "b.pdb"
        save_index(p1, idx)
        save_index(p2, load_index(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.pdb"
        path.write_bytes(b"XXXX" + b"\x00" * 8)
        with pytest.raises(FormatError, match="magic"):
            load_index(path)

    def test_truncation_names_offset(self, tmp_path):
        idx = DescriptorIndex(make_entries(2, dim=4, seed=6))
        path = tmp_path / "ok.pdb"
        save_index(path, idx)
        blob = path.read_bytes()
        for cut in (2, 10, 14, len(blob) - 3):
            bad = tmp_path / f"cut{cut}.pdb"
            bad.write_bytes(blob[:cut])
            with pytest.raises(FormatError, match="offset"):
                load_index(bad)

    def test_trailing_bytes_rejected(self, tmp_path):
        idx = DescriptorIndex(make_entries(2, dim=4, seed=7))
        path = tmp_path / "ok.pdb"
        save_index(path, idx)
        bad = tmp_path / "pad.pdb"
        bad.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            load_index(bad)


class TestBuildIndex:
    class _FakeStore:
        def __init__(self, dim):
            self.dim = dim
            self.rng = np.random.default_rng(0)

        def frame(self, fid):
            return SimpleNamespace(frame_id=fid, scene_id="s0",
                                   pose_translation=np.zeros(3, np.float32))

        def descriptor(self, fid, model):
            return SimpleNamespace(data=unit(self.rng.normal(size=self.dim)))

    def test_orders_entries_and_checks_dim(self):
        store = self._FakeStore(dim=8)
        model = SimpleNamespace(config=SimpleNamespace(descriptor_dim=8))
        idx = build_index(store, ["f2", "f0", "f1"], model)
        assert [e.frame_id for e in idx.entries] == ["f2", "f0", "f1"]
        bad_model = SimpleNamespace(config=SimpleNamespace(descriptor_dim=16))
        with pytest.raises(ContractViolation, match="dim"):
            build_index(self._FakeStore(dim=8), ["f0"], bad_model)
