"""Command-line entry point: `poco <gen|train|build-db|query|eval|gradcheck>`.

Settings resolve in order: built-in defaults, then a JSON config file
(``--config``, sectioned by subcommand), then explicit flags.  Unknown
config keys are rejected.  The seed resolves as: ``--seed`` flag, config
seed, the POCO_SEED environment variable, default 0.  Paths are taken
relative to ``--workdir`` (default: current directory), and the fully
resolved settings are echoed into each command's output directory as
``config.resolved.json`` so runs are self-describing.

Errors derived from PocoError exit with status 2 and a one-line
``error: <Kind>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .errors import PocoError
from .frames import load_frame, preprocess_frame
from .losses import CircleConfig
from .manifest import load_manifest
from .model import (GEOM_MODE_ABSOLUTE, GEOM_MODE_RELATIVE, ModelConfig,
                    init_model, load_model)
from .retrieval import (build_index, chance_recall, load_index, query,
                        run_place_recognition_eval, save_index,
                        select_database)
from .synth import SynthConfig, synth_generate
from .training import FrameStore, TrainConfig, train_loop

_SECTIONS = ("gen", "train", "build-db", "query", "eval", "gradcheck")


def _resolve_seed(flag_seed, cfg_seed):
    if flag_seed is not None:
        return int(flag_seed)
    if cfg_seed is not None:
        return int(cfg_seed)
    env = os.environ.get("POCO_SEED")
    if env is not None:
        return int(env)
    return 0


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, ValueError) as e:
        raise PocoError(f"cannot read config {path}: {e}") from e
    if not isinstance(doc, dict):
        raise PocoError(f"config {path} must be a JSON object")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise PocoError(f"unknown config sections {sorted(unknown)}; "
                        f"known: {list(_SECTIONS)}")
    return doc


def _section(doc: dict, name: str, known: set[str]) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise PocoError(f"config section {name!r} must be an object")
    unknown = set(sec) - known
    if unknown:
        raise PocoError(f"unknown keys in config section {name!r}: "
                        f"{sorted(unknown)}; known: {sorted(known)}")
    return sec


def _echo_config(out_dir: str, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved.json"), "w",
              encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _workpath(args, path: str) -> str:
    if os.path.isabs(path):
        return path
    return os.path.normpath(os.path.join(args.workdir, path))


def _model_config(sec: dict, args) -> ModelConfig:
    cfg = ModelConfig()
    use_color = sec.get("use_color", True)
    geom_mode = sec.get("geom_mode", GEOM_MODE_RELATIVE)
    if getattr(args, "no_color", False):
        use_color = False
    if getattr(args, "geom_mode", None):
        geom_mode = args.geom_mode
    return ModelConfig(stem_dim=cfg.stem_dim, stages=cfg.stages,
                       descriptor_dim=cfg.descriptor_dim,
                       encoder_heads=cfg.encoder_heads,
                       use_color=bool(use_color), geom_mode=geom_mode)


def _warm_store(store: FrameStore, frame_ids, jobs: int) -> None:
    """Preprocess frames ahead of use; a process pool only pays off with
    more than one core, so jobs<=1 stays in-process."""
    if jobs <= 1:
        for fid in frame_ids:
            store.frame(fid)
        return
    from concurrent.futures import ProcessPoolExecutor
    manifest_root = store.manifest.root
    sensor = store.manifest.frame_coords == "sensor"
    tasks = []
    for fid in frame_ids:
        rec = store.manifest.frame_by_id(fid)
        disk = store._disk_path(fid)
        if disk and not os.path.exists(disk):
            tasks.append((os.path.join(manifest_root, rec.path), rec.frame_id,
                          rec.scene_id, store.target_n, store.normals_radius,
                          store.seed, sensor, disk))
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        list(pool.map(_preprocess_job, tasks))
    for fid in frame_ids:
        store.frame(fid)


def _preprocess_job(task) -> str:
    path, frame_id, scene_id, target_n, radius, seed, sensor, disk = task
    from .frames import save_frame
    raw = load_frame(path, frame_id=frame_id, scene_id=scene_id)
    out = preprocess_frame(raw, target_n=target_n, radius=radius, seed=seed,
                           viewpoint=np.zeros(3) if sensor else None)
    save_frame(disk, out)
    return frame_id


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(args, file_cfg: dict) -> int:
    known = set(SynthConfig().to_dict())
    sec = dict(_section(file_cfg, "gen", known))
    for key in ("rooms", "frames_per_room", "points_per_frame",
                "objects_per_room", "split_mode"):
        val = getattr(args, key, None)
        if val is not None:
            sec[key] = val
    sec["seed"] = _resolve_seed(args.seed, sec.get("seed"))
    cfg = SynthConfig.from_dict(sec)
    out_dir = _workpath(args, args.out)
    manifest = synth_generate(cfg, out_dir)
    _echo_config(out_dir, {"gen": cfg.to_dict()})
    print(f"wrote {len(manifest.frames())} frames in "
          f"{len(manifest.scenes)} scenes under {out_dir}")
    return 0


_TRAIN_KEYS = {"epochs", "batch_size", "negatives_per_query", "seed",
               "triplets_per_epoch", "lr_max", "lr_min", "split",
               "checkpoint_every", "val_every", "use_color", "geom_mode",
               "circle_variant"}


def cmd_train(args, file_cfg: dict) -> int:
    sec = dict(_section(file_cfg, "train", _TRAIN_KEYS))
    seed = _resolve_seed(args.seed, sec.get("seed"))
    model_cfg = _model_config(sec, args)
    variant = sec.get("circle_variant", "standard")
    kwargs = {}
    for key in ("epochs", "batch_size", "negatives_per_query",
                "triplets_per_epoch", "lr_max", "lr_min", "split",
                "checkpoint_every", "val_every"):
        val = getattr(args, key, None)
        if val is None:
            val = sec.get(key)
        if val is not None:
            kwargs[key] = val
    cfg = TrainConfig(seed=seed, model=model_cfg,
                      circle=CircleConfig(variant=variant), **kwargs)
    manifest = load_manifest(_workpath(args, args.dataset))
    out_dir = _workpath(args, args.out)
    os.makedirs(out_dir, exist_ok=True)
    cache = args.cache_dir and _workpath(args, args.cache_dir)
    store = FrameStore(manifest, model_cfg, seed=seed, cache_dir=cache)
    _warm_store(store, [fr.frame_id for fr in
                        manifest.frames_for_split(cfg.split)], args.jobs)
    _echo_config(out_dir, {"train": {**kwargs, "seed": seed,
                                     "circle_variant": variant,
                                     "use_color": model_cfg.use_color,
                                     "geom_mode": model_cfg.geom_mode}})
    res = train_loop(manifest, cfg, out_dir, store=store)
    print(f"trained {res.steps} steps; final loss {res.last_loss:.6f}")
    print(f"checkpoint: {res.final_checkpoint}")
    print(f"metrics:    {res.metrics_path}")
    return 0


_DB_KEYS = {"split", "spacing", "seed"}


def cmd_build_db(args, file_cfg: dict) -> int:
    sec = _section(file_cfg, "build-db", _DB_KEYS)
    split = args.split or sec.get("split", "test")
    spacing = args.spacing if args.spacing is not None else sec.get("spacing", 3.0)
    seed = _resolve_seed(args.seed, sec.get("seed"))
    manifest = load_manifest(_workpath(args, args.dataset))
    model = load_model(_workpath(args, args.checkpoint))
    store = FrameStore(manifest, model.config, seed=seed,
                       cache_dir=args.cache_dir and _workpath(args, args.cache_dir))
    db_ids: list[str] = []
    for scene in manifest.scenes_for_split(split):
        db, _ = select_database(scene, spacing=float(spacing))
        db_ids.extend(db)
    _warm_store(store, db_ids, args.jobs)
    index = build_index(store, db_ids, model)
    out = _workpath(args, args.out)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    save_index(out, index)
    print(f"indexed {len(index)} database frames -> {out}")
    return 0


def cmd_query(args, file_cfg: dict) -> int:
    sec = _section(file_cfg, "query", {"top_k", "seed"})
    top_k = args.top_k if args.top_k is not None else int(sec.get("top_k", 3))
    seed = _resolve_seed(args.seed, sec.get("seed"))
    index = load_index(_workpath(args, args.index))
    model = load_model(_workpath(args, args.checkpoint))
    frame = load_frame(_workpath(args, args.frame))
    pre = preprocess_frame(frame, seed=seed)
    from .model import descriptor_for_frame
    desc = descriptor_for_frame(pre, model)
    res = query(index, desc.data, top_k=top_k, query_id=frame.frame_id)
    print(f"{'rank':>4}  {'frame_id':24s}  {'cosine':>10}")
    for rank, (fid, sim) in enumerate(res.ranked, start=1):
        print(f"{rank:>4}  {fid:24s}  {sim:>10.6f}")
    return 0


_EVAL_KEYS = {"split", "ks", "match_radius", "spacing", "seed", "untrained"}


def cmd_eval(args, file_cfg: dict) -> int:
    sec = _section(file_cfg, "eval", _EVAL_KEYS)
    split = args.split or sec.get("split", "test")
    ks = args.ks or sec.get("ks", "1,2,3")
    if isinstance(ks, str):
        ks = tuple(int(v) for v in ks.split(","))
    else:
        ks = tuple(int(v) for v in ks)
    radius = args.match_radius if args.match_radius is not None else \
        float(sec.get("match_radius", 3.0))
    spacing = args.spacing if args.spacing is not None else \
        float(sec.get("spacing", 3.0))
    seed = _resolve_seed(args.seed, sec.get("seed"))
    manifest = load_manifest(_workpath(args, args.dataset))
    if args.untrained or sec.get("untrained"):
        model = init_model(ModelConfig(), seed=seed)
    else:
        model = load_model(_workpath(args, args.checkpoint))
    store = FrameStore(manifest, model.config, seed=seed,
                       cache_dir=args.cache_dir and _workpath(args, args.cache_dir))
    _warm_store(store, [fr.frame_id for fr in
                        manifest.frames_for_split(split)], args.jobs)
    table, index, queries = run_place_recognition_eval(
        manifest, split, model, store, ks=ks, match_radius=radius,
        spacing=spacing)
    print(table.as_text())
    chance = chance_recall(index, queries, ks=ks, match_radius=radius)
    print("chance: " + "  ".join(f"r@{k}={c:.4f}" for k, c in zip(ks, chance)))
    if args.out:
        out_dir = _workpath(args, args.out)
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "recall.txt"), "w") as fh:
            fh.write(table.as_text() + "\n")
        with open(os.path.join(out_dir, "recall.csv"), "w") as fh:
            fh.write(table.as_csv())
        _echo_config(out_dir, {"eval": {"split": split, "ks": list(ks),
                                        "match_radius": radius,
                                        "spacing": spacing, "seed": seed}})
        print(f"wrote recall.txt / recall.csv under {out_dir}")
    return 0


def cmd_gradcheck(args, file_cfg: dict) -> int:
    sec = _section(file_cfg, "gradcheck", {"seed"})
    seed = _resolve_seed(args.seed, sec.get("seed"))
    from .checks import all_passed, block_grad_checks
    reports = block_grad_checks(seed=seed)
    for name, rep in reports:
        worst = max((e.max_rel_error for e in rep.entries), default=0.0)
        status = "PASS" if rep.passed else "FAIL"
        print(f"{status}  {name:16s} max_rel_err={worst:.3e}")
        if not rep.passed:
            print(rep.summary())
    if not all_passed(reports):
        print("gradient check FAILED", file=sys.stderr)
        return 1
    print("all blocks pass")
    return 0


# --------------------------------------------------------------------------
# parser


def _common_flags(ap: argparse.ArgumentParser, top: bool) -> None:
    # Top-level carries the defaults; subcommand copies use SUPPRESS so a
    # flag may be given on either side of the subcommand without the
    # subparser default clobbering an already-parsed value.
    d = dict if top else (lambda **kw: {**kw, "default": argparse.SUPPRESS})
    ap.add_argument("--workdir", **d(default=".",
                    help="base for relative paths"))
    ap.add_argument("--config", **d(default=None, help="JSON config file"))
    ap.add_argument("--seed", type=int, **d(default=None,
                    help="global seed (overrides config and POCO_SEED)"))
    ap.add_argument("--jobs", type=int, **d(default=os.cpu_count() or 1,
                    help="parallel frame-preprocessing workers"))
    ap.add_argument("--cache-dir", **d(default=None,
                    help="directory for preprocessed-frame cache"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="poco",
        description="Point-cloud place recognition: synthetic data, "
                    "training, indexing, retrieval evaluation.")
    _common_flags(ap, top=True)
    common = argparse.ArgumentParser(add_help=False)
    _common_flags(common, top=False)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset",
                       parents=[common])
    g.add_argument("--out", required=True)
    g.add_argument("--rooms", type=int)
    g.add_argument("--frames-per-room", dest="frames_per_room", type=int)
    g.add_argument("--points-per-frame", dest="points_per_frame", type=int)
    g.add_argument("--objects-per-room", dest="objects_per_room", type=int)
    g.add_argument("--split-mode", dest="split_mode",
                   choices=["joint", "disjoint"])
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a model on a dataset",
                       parents=[common])
    t.add_argument("--dataset", required=True, help="manifest.json path")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--negatives-per-query", dest="negatives_per_query", type=int)
    t.add_argument("--triplets-per-epoch", dest="triplets_per_epoch", type=int)
    t.add_argument("--lr-max", dest="lr_max", type=float)
    t.add_argument("--lr-min", dest="lr_min", type=float)
    t.add_argument("--split")
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--val-every", dest="val_every", type=int)
    t.add_argument("--no-color", action="store_true",
                   help="ablation: zero the color channels")
    t.add_argument("--geom-mode", choices=[GEOM_MODE_RELATIVE,
                                           GEOM_MODE_ABSOLUTE],
                   help="ablation: gate on absolute coordinates instead of "
                        "the invariant pairwise encoding")
    t.set_defaults(fn=cmd_train)

    b = sub.add_parser("build-db", help="build a descriptor index",
                       parents=[common])
    b.add_argument("--dataset", required=True)
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--split")
    b.add_argument("--spacing", type=float)
    b.set_defaults(fn=cmd_build_db)

    q = sub.add_parser("query", help="rank database frames for one frame",
                       parents=[common])
    q.add_argument("--index", required=True)
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--frame", required=True, help="PCF1 file")
    q.add_argument("--top-k", dest="top_k", type=int)
    q.set_defaults(fn=cmd_query)

    e = sub.add_parser("eval", help="full place-recognition evaluation",
                       parents=[common])
    e.add_argument("--dataset", required=True)
    e.add_argument("--checkpoint", help="omit with --untrained")
    e.add_argument("--split")
    e.add_argument("--ks", help="comma-separated, e.g. 1,2,3")
    e.add_argument("--match-radius", dest="match_radius", type=float)
    e.add_argument("--spacing", type=float)
    e.add_argument("--untrained", action="store_true",
                   help="evaluate a freshly initialized model")
    e.add_argument("--out", help="directory for recall.txt / recall.csv")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="central-difference gradient checks",
                       parents=[common])
    c.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        file_cfg = _load_config_file(
            args.config and _workpath(args, args.config))
        if args.command == "eval" and not args.untrained and not args.checkpoint:
            raise PocoError("eval needs --checkpoint (or --untrained)")
        return args.fn(args, file_cfg)
    except PocoError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
