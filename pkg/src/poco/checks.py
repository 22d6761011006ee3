"""Block-level gradient checks used by the CLI and the acceptance suite.

Each check rebuilds a small computation from `Parameter` values and
compares analytic against central-difference gradients via
`optim.grad_check`.  Blocks run on a miniature model (8-d features, one
stage, 24 points) so the full battery stays well under a minute.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import CircleConfig, TripletConfig, circle_loss, triplet_loss
from .model import (LevelState, ModelConfig, PocoModel, StageConfig,
                    cluster_forward, encode_global, init_model,
                    model_forward, reducer_forward)
from .frames import PointFrame
from .optim import GradCheckReport, Parameter, grad_check


def mini_config() -> ModelConfig:
    return ModelConfig(
        stem_dim=8,
        stages=[StageConfig(out_dim=8, k_neighbors=4, reduce_ratio=4,
                            heads=2, centers_ratio=4)],
        descriptor_dim=8,
        encoder_heads=2)


def mini_frame(seed: int = 0, n: int = 24) -> PointFrame:
    rng = np.random.default_rng(seed)
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointFrame(
        frame_id="mini", scene_id="mini",
        colors=rng.uniform(0, 1, (n, 3)).astype(np.float32),
        positions=rng.uniform(-1, 1, (n, 3)).astype(np.float32),
        pose_translation=np.zeros(3, dtype=np.float32),
        normals=normals.astype(np.float32))


def _rand_param(name: str, rng, shape, scale=0.5) -> Parameter:
    return Parameter(name, scale * rng.normal(size=shape))


def _level(rng, n: int, d: int, feat_param: Parameter) -> LevelState:
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return LevelState(positions=rng.uniform(-1, 1, (n, 3)),
                      normals=normals,
                      features=feat_param.value)


def block_grad_checks(seed: int = 0, h: float = 1e-5, tol: float = 1e-4,
                      entries: int = 4) -> list[tuple[str, GradCheckReport]]:
    """Run every block check; returns (block name, report) pairs.

    ``entries`` bounds how many entries of each parameter are probed; the
    probe positions are seeded, so reports are reproducible.
    """
    out: list[tuple[str, GradCheckReport]] = []
    rng = np.random.default_rng(seed)
    cfg = mini_config()
    stage = cfg.stages[0]
    model = init_model(cfg, seed=seed)
    n, d = 16, cfg.stem_dim

    # stem: the 9->d affine on raw per-point features
    x = _rand_param("stem.in", rng, (n, 9))
    w = _rand_param("stem.w", rng, (9, d))
    b = _rand_param("stem.b", rng, (d,))
    proj_stem = np.random.default_rng(seed + 1).normal(size=(n, d))
    out.append(("stem", grad_check(
        lambda: ad.tsum(ad.mul(ad.affine(x.value, w.value, b.value),
                               ad.as_tensor(proj_stem))),
        [x, w, b], h=h, tol=tol, max_entries_per_param=entries, seed=seed)))

    # reducer block on a random level
    feat = _rand_param("reducer.in", rng, (n, d))
    state = _level(rng, n, d, feat)
    rparams, cparams = model.stages[0]
    m_out = n // stage.reduce_ratio
    proj_red = np.random.default_rng(seed + 2).normal(size=(m_out, stage.out_dim))

    def f_reducer():
        new = reducer_forward(state, stage, rparams)
        return ad.tsum(ad.mul(new.features, ad.as_tensor(proj_red)))

    red_params = [feat, rparams.f1_w, rparams.f1_b, rparams.f2_w, rparams.f2_b,
                  rparams.f3_w, rparams.f3_b, rparams.f4_w, rparams.f4_b]
    out.append(("reducer", grad_check(f_reducer, red_params, h=h, tol=tol,
                                      max_entries_per_param=entries, seed=seed)))

    # cluster block
    feat_c = _rand_param("cluster.in", rng, (n, stage.out_dim))
    state_c = _level(rng, n, stage.out_dim, feat_c)
    proj_clu = np.random.default_rng(seed + 3).normal(size=(n, stage.out_dim))

    def f_cluster():
        new = cluster_forward(state_c, stage, cparams)
        return ad.tsum(ad.mul(new.features, ad.as_tensor(proj_clu)))

    clu_params = [feat_c, cparams.alpha, cparams.beta, cparams.h_w, cparams.h_b]
    out.append(("cluster", grad_check(f_cluster, clu_params, h=h, tol=tol,
                                      max_entries_per_param=entries, seed=seed)))

    # encoder (single virtual point -> descriptor)
    feat_e = _rand_param("encoder.in", rng, (n, stage.out_dim))
    state_e = _level(rng, n, stage.out_dim, feat_e)
    proj_enc = np.random.default_rng(seed + 4).normal(size=(cfg.descriptor_dim,))

    def f_encoder():
        desc = encode_global(state_e, model.encoder)
        return ad.tsum(ad.mul(desc, ad.as_tensor(proj_enc)))

    enc_params = [feat_e, model.encoder.f1_w, model.encoder.f1_b,
                  model.encoder.f2_w, model.encoder.f2_b,
                  model.encoder.f3_w, model.encoder.f3_b,
                  model.encoder.f4_w, model.encoder.f4_b]
    out.append(("encoder", grad_check(f_encoder, enc_params, h=h, tol=tol,
                                      max_entries_per_param=entries, seed=seed)))

    # circle loss
    sp = Parameter("s_p", np.array([0.62, 0.18, 0.85]))
    sn = Parameter("s_n", np.array([0.40, -0.05, 0.10, 0.55]))
    out.append(("circle_loss", grad_check(
        lambda: circle_loss(sp.value, sn.value, CircleConfig()),
        [sp, sn], h=h, tol=tol, seed=seed)))

    # triplet loss (margin active so the hinge is differentiable at the probe)
    gq = _rand_param("g_q", rng, (6,), scale=0.3)
    gp = _rand_param("g_p", rng, (6,), scale=0.3)
    gn = _rand_param("g_n", rng, (6,), scale=0.3)
    out.append(("triplet_loss", grad_check(
        lambda: triplet_loss(gq.value, gp.value, gn.value, TripletConfig()),
        [gq, gp, gn], h=h, tol=tol, seed=seed)))

    # end-to-end miniature model
    frame = mini_frame(seed=seed)
    e2e_model = init_model(cfg, seed=seed + 5)
    proj_e2e = np.random.default_rng(seed + 6).normal(size=(cfg.descriptor_dim,))

    def f_e2e():
        desc = model_forward(frame, e2e_model)
        return ad.tsum(ad.mul(desc, ad.as_tensor(proj_e2e)))

    out.append(("end_to_end", grad_check(
        f_e2e, e2e_model.parameters(), h=h, tol=tol,
        max_entries_per_param=max(2, entries // 2), seed=seed)))
    return out


def all_passed(reports: list[tuple[str, GradCheckReport]]) -> bool:
    return all(rep.passed for _, rep in reports)
