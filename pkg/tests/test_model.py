"""Tests for model configuration, plans, forward blocks, and persistence."""

import numpy as np
import pytest

import poco.autodiff as ad
from poco.autodiff import Tensor
from poco.errors import ContractViolation, FormatError
from poco.frames import PointFrame
from poco.model import (GEOM_MODE_ABSOLUTE, GEOM_MODE_RELATIVE, POSITION_SCALE,
                        ClusterParams, LevelState, ModelConfig, StageConfig,
                        build_plan, cluster_forward, cluster_plan, default_stages,
                        encode_global, init_model, level_sizes, load_model,
                        model_forward, reducer_forward, reducer_plan, save_model,
                        stem_input)
from poco.optim import Parameter, save_checkpoint


def tiny_config(**overrides) -> ModelConfig:
    """Two small stages so forward tests run in milliseconds."""
    kwargs = dict(
        stem_dim=8,
        stages=[StageConfig(out_dim=8, k_neighbors=5, reduce_ratio=4,
                            heads=2, centers_ratio=4),
                StageConfig(out_dim=8, k_neighbors=4, reduce_ratio=4,
                            heads=2, centers_ratio=4)],
        descriptor_dim=8,
        encoder_heads=2,
    )
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def make_cloud(n=80, seed=0, frame_id="f0"):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-2.0, 2.0, (n, 3)).astype(np.float32)
    nrm = rng.normal(size=(n, 3))
    nrm = (nrm / np.linalg.norm(nrm, axis=1, keepdims=True)).astype(np.float32)
    col = rng.random((n, 3)).astype(np.float32)
    return PointFrame(frame_id=frame_id, scene_id="s0", colors=col,
                      positions=pos, pose_translation=np.zeros(3, np.float32),
                      normals=nrm)


class TestConfigs:
    def test_stage_config_rejects_nonpositive_fields(self):
        for field in ("out_dim", "k_neighbors", "reduce_ratio", "heads"):
            with pytest.raises(ContractViolation):
                StageConfig(**{"out_dim": 8, field: 0})

    def test_stage_config_rejects_indivisible_heads(self):
        with pytest.raises(ContractViolation):
            StageConfig(out_dim=10, heads=4)

    def test_stage_config_rejects_small_centers_ratio(self):
        with pytest.raises(ContractViolation):
            StageConfig(out_dim=8, centers_ratio=1)

    def test_model_config_rejects_unknown_geom_mode(self):
        with pytest.raises(ContractViolation):
            ModelConfig(geom_mode="fancy")

    def test_model_config_rejects_indivisible_descriptor(self):
        with pytest.raises(ContractViolation):
            ModelConfig(descriptor_dim=250, encoder_heads=4)

    def test_model_config_rejects_empty_stages(self):
        with pytest.raises(ContractViolation):
            ModelConfig(stages=[])

    def test_default_stage_widths(self):
        assert [s.out_dim for s in default_stages()] == [32, 64, 128, 256]
        cfg = ModelConfig()
        assert cfg.stem_dim == 32 and cfg.descriptor_dim == 256
        assert all(s.k_neighbors == 16 and s.reduce_ratio == 4 and
                   s.heads == 4 and s.centers_ratio == 4 for s in cfg.stages)

    def test_gate_dim_by_mode(self):
        assert ModelConfig().gate_dim == 8
        assert ModelConfig(geom_mode=GEOM_MODE_ABSOLUTE).gate_dim == 6

    def test_config_dict_round_trip(self):
        cfg = tiny_config(use_color=False, geom_mode=GEOM_MODE_ABSOLUTE)
        again = ModelConfig.from_dict(cfg.to_dict())
        assert again == cfg
        assert again.to_dict() == cfg.to_dict()

    def test_cache_key_tracks_geometry_not_widths(self):
        base = tiny_config()
        wider = tiny_config(descriptor_dim=16, encoder_heads=2,
                            use_color=False)
        assert base.cache_key() == wider.cache_key()
        assert base.cache_key() != tiny_config(geom_mode=GEOM_MODE_ABSOLUTE).cache_key()
        other = tiny_config()
        other.stages[0].k_neighbors = 7
        assert base.cache_key() != other.cache_key()


class TestLevelSizes:
    def test_default_pyramid_from_2000(self):
        assert level_sizes(2000, ModelConfig()) == [2000, 500, 125, 31, 7]

    def test_tiny_pyramid(self):
        assert level_sizes(80, tiny_config()) == [80, 20, 5]

    def test_floor_at_one(self):
        assert level_sizes(5, tiny_config()) == [5, 1, 1]

    def test_matches_built_plan(self):
        frame = make_cloud(n=80, seed=3)
        plan = build_plan(frame.positions, frame.normals, tiny_config())
        assert plan.level_sizes == [80, 20, 5]


class TestInit:
    def test_seeded_init_is_deterministic(self):
        cfg = tiny_config()
        a, b = init_model(cfg, seed=5), init_model(cfg, seed=5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert pa.name == pb.name
            assert np.array_equal(pa.value.data, pb.value.data)
        c = init_model(cfg, seed=6)
        assert not np.array_equal(a.stem_w.value.data, c.stem_w.value.data)

    def test_values_survive_float32_rounding(self):
        model = init_model(tiny_config(), seed=1)
        for p in model.parameters():
            v = p.value.data
            assert np.array_equal(v, v.astype(np.float32).astype(np.float64)), p.name

    def test_structured_initial_values(self):
        model = init_model(tiny_config(), seed=2)
        P = model._params
        for i in (1, 2):
            assert np.all(P[f"stage{i}.f4.b"].value.data == 1.0)
            assert P[f"stage{i}.alpha"].value.data == 1.0
            assert P[f"stage{i}.beta"].value.data == 0.0
            assert np.all(P[f"stage{i}.h.w"].value.data == 0.0)
            assert np.all(P[f"stage{i}.h.b"].value.data == 0.0)
            for f in ("f1", "f2", "f3"):
                assert np.all(P[f"stage{i}.{f}.b"].value.data == 0.0)
        assert np.all(P["encoder.f4.b"].value.data == 1.0)
        assert np.all(P["stem.b"].value.data == 0.0)

    def test_parameter_shapes_follow_config(self):
        cfg = tiny_config()
        model = init_model(cfg, seed=0)
        P = model._params
        assert P["stem.w"].value.data.shape == (9, 8)
        assert P["stage1.f1.w"].value.data.shape == (8, 8)
        assert P["stage1.f4.w"].value.data.shape == (cfg.gate_dim, 2)
        assert P["encoder.f1.w"].value.data.shape == (8, 8)
        absolute = init_model(tiny_config(geom_mode=GEOM_MODE_ABSOLUTE), seed=0)
        assert absolute._params["stage1.f4.w"].value.data.shape == (6, 2)


class TestStemInput:
    def test_channel_layout(self):
        frame = make_cloud(n=30, seed=4)
        cfg = tiny_config()
        x = stem_input(frame, cfg)
        assert x.shape == (30, 9)
        pos = frame.positions.astype(np.float64)
        assert np.allclose(x[:, 0:3], frame.colors.astype(np.float64) - 0.5)
        assert np.allclose(x[:, 3:6], (pos - pos.mean(axis=0)) / POSITION_SCALE)
        assert np.allclose(x[:, 6:9], frame.normals.astype(np.float64))

    def test_color_channels_zeroed_without_color(self):
        frame = make_cloud(n=30, seed=4)
        x = stem_input(frame, tiny_config(use_color=False))
        assert np.all(x[:, 0:3] == 0.0)
        assert not np.all(x[:, 3:9] == 0.0)

    def test_centered_positions_have_zero_mean(self):
        frame = make_cloud(n=50, seed=5)
        x = stem_input(frame, tiny_config())
        assert np.allclose(x[:, 3:6].mean(axis=0), 0.0, atol=1e-12)


class TestForward:
    def test_descriptor_is_unit_norm(self):
        frame = make_cloud(n=80, seed=6)
        model = init_model(tiny_config(), seed=0)
        d = model_forward(frame, model).data
        assert d.shape == (8,)
        assert np.isfinite(d).all()
        assert abs(np.linalg.norm(d) - 1.0) < 1e-9

    def test_default_config_descriptor_and_pyramid(self):
        frame = make_cloud(n=2000, seed=7)
        model = init_model(ModelConfig(), seed=0)
        plan = build_plan(frame.positions, frame.normals, model.config)
        assert plan.level_sizes == [2000, 500, 125, 31, 7]
        d = model_forward(frame, model, plan).data
        assert d.shape == (256,)
        assert abs(np.linalg.norm(d) - 1.0) < 1e-9

    def test_plan_and_inline_forward_agree(self):
        frame = make_cloud(n=80, seed=8)
        model = init_model(tiny_config(), seed=1)
        plan = build_plan(frame.positions, frame.normals, model.config)
        a = model_forward(frame, model, plan).data
        b = model_forward(frame, model).data
        assert np.array_equal(a, b)

    def test_forward_is_deterministic(self):
        frame = make_cloud(n=80, seed=9)
        model = init_model(tiny_config(), seed=2)
        assert np.array_equal(model_forward(frame, model).data,
                              model_forward(frame, model).data)

    def test_missing_normals_rejected(self):
        frame = make_cloud(n=40, seed=10)
        bare = PointFrame(frame_id="f", scene_id="s", colors=frame.colors,
                          positions=frame.positions,
                          pose_translation=frame.pose_translation)
        with pytest.raises(ContractViolation):
            model_forward(bare, init_model(tiny_config(), seed=0))

    def test_geometry_only_model_ignores_colors(self):
        frame = make_cloud(n=80, seed=11)
        recolored = PointFrame(frame_id="f0", scene_id="s0",
                               colors=1.0 - frame.colors,
                               positions=frame.positions,
                               pose_translation=frame.pose_translation,
                               normals=frame.normals)
        model = init_model(tiny_config(use_color=False), seed=3)
        assert np.array_equal(model_forward(frame, model).data,
                              model_forward(recolored, model).data)
        colorful = init_model(tiny_config(), seed=3)
        assert not np.allclose(model_forward(frame, colorful).data,
                               model_forward(recolored, colorful).data)

    def test_absolute_mode_runs_and_differs(self):
        frame = make_cloud(n=80, seed=12)
        rel = init_model(tiny_config(), seed=4)
        absm = init_model(tiny_config(geom_mode=GEOM_MODE_ABSOLUTE), seed=4)
        da = model_forward(frame, absm).data
        assert abs(np.linalg.norm(da) - 1.0) < 1e-9
        assert not np.allclose(model_forward(frame, rel).data, da)

    def test_descriptor_translation_invariant(self):
        frame = make_cloud(n=120, seed=13)
        moved = PointFrame(frame_id="f0", scene_id="s0", colors=frame.colors,
                           positions=frame.positions + np.float32([0.7, -1.3, 2.1]),
                           pose_translation=frame.pose_translation,
                           normals=frame.normals)
        model = init_model(tiny_config(), seed=5)
        np.testing.assert_allclose(model_forward(frame, model).data,
                                   model_forward(moved, model).data, atol=1e-8)


class TestPlans:
    def test_reducer_plan_rejects_small_levels(self):
        frame = make_cloud(n=4, seed=14)
        with pytest.raises(ContractViolation):
            reducer_plan(frame.positions.astype(np.float64),
                         frame.normals.astype(np.float64),
                         StageConfig(out_dim=8, k_neighbors=5, heads=2),
                         GEOM_MODE_RELATIVE)

    def test_relative_gate_input_rigid_motion_invariant(self):
        rng = np.random.default_rng(15)
        frame = make_cloud(n=200, seed=15)
        pos = frame.positions.astype(np.float64)
        nrm = frame.normals.astype(np.float64)
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        R = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])
        t = np.array([0.4, -2.0, 1.3])
        cfg = StageConfig(out_dim=8, k_neighbors=6, heads=2)
        a = reducer_plan(pos, nrm, cfg, GEOM_MODE_RELATIVE)
        b = reducer_plan(pos @ R.T + t, nrm @ R.T, cfg, GEOM_MODE_RELATIVE)
        assert np.array_equal(a.sel_idx, b.sel_idx)
        assert np.array_equal(a.neigh_idx, b.neigh_idx)
        np.testing.assert_allclose(a.gate_input, b.gate_input, atol=1e-10)
        aa = reducer_plan(pos, nrm, cfg, GEOM_MODE_ABSOLUTE)
        bb = reducer_plan(pos @ R.T + t, nrm @ R.T, cfg, GEOM_MODE_ABSOLUTE)
        assert not np.allclose(aa.gate_input, bb.gate_input, atol=1e-3)

    def test_reducer_forward_standalone(self):
        frame = make_cloud(n=80, seed=16)
        cfg = tiny_config().stages[0]
        model = init_model(tiny_config(), seed=6)
        state = LevelState(positions=frame.positions.astype(np.float64),
                           normals=frame.normals.astype(np.float64),
                           features=Tensor(np.random.default_rng(0).normal(size=(80, 8))))
        out = reducer_forward(state, cfg, model.stages[0][0])
        assert out.n == 20
        assert out.features.data.shape == (20, 8)
        rows = {tuple(np.round(r, 6)) for r in state.positions}
        assert all(tuple(np.round(r, 6)) in rows for r in out.positions)


class TestClusterBlock:
    @staticmethod
    def _random_state(n, d, seed):
        rng = np.random.default_rng(seed)
        pos = rng.uniform(-1, 1, (n, 3))
        nrm = rng.normal(size=(n, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        feats = Tensor(rng.normal(size=(n, d)))
        return LevelState(positions=pos, normals=nrm, features=feats)

    def test_zero_dispatch_is_exact_identity(self):
        state = self._random_state(40, 8, 17)
        cfg = tiny_config().stages[0]
        model = init_model(tiny_config(), seed=7)  # h.w and h.b start at zero
        out = cluster_forward(state, cfg, model.stages[0][1])
        assert np.array_equal(out.features.data, state.features.data)

    def test_nonzero_dispatch_moves_features(self):
        state = self._random_state(40, 8, 18)
        cfg = tiny_config().stages[0]
        model = init_model(tiny_config(), seed=8)
        model._params["stage1.h.w"].value.data[:] = np.eye(8) * 0.5
        out = cluster_forward(state, cfg, model.stages[0][1])
        assert not np.allclose(out.features.data, state.features.data)

    def test_centers_stay_in_feature_hull(self):
        cfg = StageConfig(out_dim=8, k_neighbors=5, heads=2, centers_ratio=4)
        for seed in range(50):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(8, 40))
            state = self._random_state(n, 8, seed + 1000)
            params = {
                "c.alpha": Parameter("c.alpha", rng.uniform(0.5, 3.0)),
                "c.beta": Parameter("c.beta", rng.normal()),
                "c.h.w": Parameter("c.h.w", rng.normal(size=(8, 8))),
                "c.h.b": Parameter("c.h.b", rng.normal(size=8)),
            }
            plan = cluster_plan(state.positions, cfg)
            capture = {}
            cluster_forward(state, cfg, ClusterParams("c", params), plan,
                            capture=capture, tag="c")
            centers = capture["centers"]["c"]
            X = state.features.data
            anchors = X[plan.init_idx].mean(axis=1)
            lo = np.minimum(X.min(axis=0)[None, :], anchors)
            hi = np.maximum(X.max(axis=0)[None, :], anchors)
            assert np.all(centers >= lo - 1e-9)
            assert np.all(centers <= hi + 1e-9)

    def test_affinity_is_sigmoid_bounded(self):
        state = self._random_state(40, 8, 19)
        cfg = tiny_config().stages[0]
        model = init_model(tiny_config(), seed=9)
        capture = {}
        cluster_forward(state, cfg, model.stages[0][1], capture=capture, tag="c")
        s = capture["affinity"]["c"]
        assert s.shape == (10, 40)
        assert np.all(s > 0.0) and np.all(s < 1.0)

    def test_cluster_plan_rejects_tiny_levels(self):
        state = self._random_state(3, 8, 20)
        with pytest.raises(ContractViolation):
            cluster_plan(state.positions, tiny_config().stages[0])


class TestEncoder:
    def test_encoder_on_single_point(self):
        state = LevelState(positions=np.zeros((1, 3)),
                           normals=np.array([[0.0, 0.0, 1.0]]),
                           features=Tensor(np.random.default_rng(0).normal(size=(1, 8))))
        model = init_model(tiny_config(), seed=10)
        d = encode_global(state, model.encoder).data
        assert d.shape == (8,)
        assert abs(np.linalg.norm(d) - 1.0) < 1e-9

    def test_encoder_rejects_empty_level(self):
        state = LevelState(positions=np.zeros((0, 3)), normals=np.zeros((0, 3)),
                           features=Tensor(np.zeros((0, 8))))
        model = init_model(tiny_config(), seed=10)
        with pytest.raises(ContractViolation):
            encode_global(state, model.encoder)


class TestCapture:
    def test_attention_rows_sum_to_one(self):
        frame = make_cloud(n=80, seed=21)
        model = init_model(tiny_config(), seed=11)
        capture = {}
        model_forward(frame, model, capture=capture)
        tags = set(capture["attention"])
        assert tags == {"stage1.reducer", "stage2.reducer", "encoder"}
        for tag, psi in capture["attention"].items():
            assert psi.ndim == 3
            np.testing.assert_allclose(psi.sum(axis=2), 1.0, atol=1e-6,
                                       err_msg=tag)

    def test_cluster_captures_present(self):
        frame = make_cloud(n=80, seed=22)
        model = init_model(tiny_config(), seed=12)
        capture = {}
        model_forward(frame, model, capture=capture)
        assert set(capture["affinity"]) == {"stage1.cluster", "stage2.cluster"}
        assert set(capture["centers"]) == {"stage1.cluster", "stage2.cluster"}


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path):
        cfg = tiny_config(use_color=False)
        model = init_model(cfg, seed=13)
        path = tmp_path / "model.pck"
        save_model(path, model)
        again = load_model(path)
        assert again.config == cfg
        for pa, pb in zip(model.parameters(), again.parameters()):
            assert pa.name == pb.name
            assert np.array_equal(pa.value.data, pb.value.data)
        frame = make_cloud(n=80, seed=23)
        assert np.array_equal(model_forward(frame, model).data,
                              model_forward(frame, again).data)

    def test_load_rejects_foreign_checkpoint(self, tmp_path):
        path = tmp_path / "other.pck"
        save_checkpoint(path, [Parameter("w", np.zeros(3))],
                        metadata={"kind": "something-else"})
        with pytest.raises(FormatError):
            load_model(path)

    def test_load_rejects_missing_metadata(self, tmp_path):
        path = tmp_path / "bare.pck"
        save_checkpoint(path, [Parameter("w", np.zeros(3))])
        with pytest.raises(FormatError):
            load_model(path)

    def test_load_rejects_parameter_set_mismatch(self, tmp_path):
        cfg = tiny_config()
        model = init_model(cfg, seed=14)
        path = tmp_path / "short.pck"
        save_checkpoint(path, model.parameters()[:-1],
                        metadata={"kind": "poco-model", "config": cfg.to_dict()})
        with pytest.raises(FormatError, match="missing"):
            load_model(path)

    def test_load_rejects_shape_mismatch(self, tmp_path):
        cfg = tiny_config()
        model = init_model(cfg, seed=15)
        params = model.parameters()
        bad = [Parameter(p.name, np.zeros((2, 2)) if p.name == "stem.w"
                         else p.value.data) for p in params]
        path = tmp_path / "badshape.pck"
        save_checkpoint(path, bad,
                        metadata={"kind": "poco-model", "config": cfg.to_dict()})
        with pytest.raises(FormatError, match="shape"):
            load_model(path)
