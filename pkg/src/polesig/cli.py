"""Command-line pipeline: synth -> detect -> render -> train -> embed/eval/repro.

Every stage reads and writes files, so stages can be rerun independently,
and every command is deterministic given its configuration (seeds
included).  `repro` chains the full pipeline on a synthetic corpus and
prints a comparison table of the handcrafted baseline against both
trained descriptor models.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import encoder_net, retrieval_eval, scene_synth, training
from .errors import ConfigError, PolesigError
from .pole_detector import (
    DetectorParams,
    associate_detections,
    detect_poles,
    read_detections,
    write_detections,
)
from .pole_image import (
    PoleImageParams,
    read_manifest,
    render_pole_image,
    write_manifest,
    write_pgm,
)
from .scene_synth import SynthConfig, generate_scene, read_cloud, read_scene, sample_session, write_cloud, write_scene
from .training import TrainConfig, load_observations, split_by_pole, train


# ---------------------------------------------------------------------------
# Unified configuration
# ---------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    detector: DetectorParams = field(default_factory=DetectorParams)
    image: PoleImageParams = field(default_factory=PoleImageParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    sessions: int = 2
    association_tol: float = 0.5

    def validate(self) -> None:
        self.synth.validate()
        self.detector.validate()
        self.image.validate()
        self.train.validate()
        if self.sessions < 1:
            raise ConfigError("sessions must be >= 1")
        if self.association_tol <= 0:
            raise ConfigError("association_tol must be positive")


def _section_from_dict(cls, d: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}' section: {sorted(unknown)}")
    return cls(**d)


def pipeline_config_from_dict(d: dict) -> PipelineConfig:
    known = {"seed", "sessions", "association_tol", "synth", "detector", "image", "train"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    cfg = PipelineConfig()
    if "synth" in d:
        cfg.synth = scene_synth.config_from_dict(d["synth"])
    if "detector" in d:
        cfg.detector = _section_from_dict(DetectorParams, d["detector"], "detector")
    if "image" in d:
        cfg.image = _section_from_dict(PoleImageParams, d["image"], "image")
    if "train" in d:
        cfg.train = training.train_config_from_dict(d["train"])
    if "sessions" in d:
        cfg.sessions = int(d["sessions"])
    if "association_tol" in d:
        cfg.association_tol = float(d["association_tol"])
    if "seed" in d:
        cfg = set_seed(cfg, int(d["seed"]))
    cfg.validate()
    return cfg


def set_seed(cfg: PipelineConfig, seed: int) -> PipelineConfig:
    """Override every nested seed at once."""
    return replace(cfg, synth=replace(cfg.synth, seed=seed), train=replace(cfg.train, seed=seed))


def load_config(path=None, seed=None) -> PipelineConfig:
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = pipeline_config_from_dict(json.load(fh))
    else:
        cfg = PipelineConfig()
    if seed is not None:
        cfg = set_seed(cfg, seed)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.seed)
    if args.poles is not None:
        cfg.synth.n_poles = args.poles
    if args.area_side is not None:
        cfg.synth.area_side = args.area_side
    if args.sessions is not None:
        cfg.sessions = args.sessions
    cfg.validate()

    os.makedirs(args.out, exist_ok=True)
    scene, truth = generate_scene(cfg.synth)
    write_scene(scene, os.path.join(args.out, "scene.json"))
    for k in range(cfg.sessions):
        cloud = sample_session(scene, k)
        write_cloud(cloud, os.path.join(args.out, f"session_{k}.xyz"))
        print(f"session {k}: {len(cloud)} points -> session_{k}.xyz")
    print(f"{len(truth)} poles -> scene.json")
    return 0


def cmd_detect(args) -> int:
    cfg = load_config(args.config, None)
    det = cfg.detector
    if args.cell_size is not None:
        det.cell_size = args.cell_size
    if args.min_extent is not None:
        det.min_vertical_extent = args.min_extent
    if args.max_rms is not None:
        det.max_horizontal_rms = args.max_rms
    if args.min_support is not None:
        det.min_support_points = args.min_support
    if args.merge_radius is not None:
        det.merge_radius = args.merge_radius
    tol = args.tol if args.tol is not None else cfg.association_tol

    cloud = read_cloud(args.cloud)
    detections = detect_poles(cloud, det)
    if args.truth is not None:
        truth = read_scene(args.truth).ground_truth()
        _, precision, recall = associate_detections(detections, truth, tol)
        print(f"precision {precision:.4f}  recall {recall:.4f}  ({len(detections)} detections, {len(truth)} truth poles)")
    else:
        for i, d in enumerate(detections):
            d.pole_id = i
        print(f"{len(detections)} detections")
    write_detections(detections, args.out)
    return 0


def cmd_render(args) -> int:
    cfg = load_config(args.config, None)
    params = cfg.image
    if args.radius is not None:
        params.radius = args.radius
    if args.z_min is not None:
        params.z_min = args.z_min
    if args.z_max is not None:
        params.z_max = args.z_max
    if args.rows is not None:
        params.rows = args.rows
    if args.cols is not None:
        params.cols = args.cols
    if args.no_canonicalize:
        params.canonicalize = False
    params.validate()

    cloud = read_cloud(args.cloud)
    detections = read_detections(args.detections)
    os.makedirs(args.out, exist_ok=True)
    entries = []
    skipped = 0
    for det in detections:
        if det.pole_id < 0:
            skipped += 1
            continue
        img = render_pole_image(cloud, det, params)
        name = f"pole{det.pole_id:05d}_s{cloud.session_id}.pgm"
        write_pgm(img, os.path.join(args.out, name))
        entries.append((det.pole_id, cloud.session_id, name))
    manifest = os.path.join(args.out, args.manifest)
    mode = "a" if args.append and os.path.exists(manifest) else "w"
    existing = read_manifest(manifest) if mode == "a" else []
    write_manifest(existing + entries, manifest)
    print(f"{len(entries)} images rendered ({skipped} unlabeled detections skipped) -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    tc = cfg.train
    if args.regime is not None:
        tc.regime = args.regime
    if args.epochs is not None:
        tc.epochs = args.epochs
    if args.lr is not None:
        tc.lr = args.lr
    if args.temperature is not None:
        tc.temperature = args.temperature
    if args.batch_pole_ids is not None:
        tc.batch_pole_ids = args.batch_pole_ids
    if args.sl_batch_pairs is not None:
        tc.sl_batch_pairs = args.sl_batch_pairs
    if args.split_ratio is not None:
        tc.split_ratio = args.split_ratio
    if args.augment_shift:
        tc.augment_shift = True
    if args.emb_dim is not None:
        tc.emb_dim = args.emb_dim
    tc.validate()

    obs = load_observations(args.manifest)
    result = train(obs, tc, out_checkpoint=args.out, out_history=args.history)
    print(f"initial val recall@1: {result.initial_val_recall:.4f}")
    for epoch, loss, recall in result.history:
        print(f"epoch {epoch:3d}  loss {loss:.6f}  val recall@1 {recall:.4f}")
    print(f"checkpoint -> {args.out}")
    return 0


def cmd_embed(args) -> int:
    ckpt = encoder_net.read_checkpoint(args.checkpoint)
    obs = load_observations(args.manifest)
    db = retrieval_eval.embed_all(ckpt.params, obs)
    retrieval_eval.write_db(db, args.out)
    print(f"{len(db)} descriptors (dim {db.dim}) -> {args.out}")
    return 0


def _print_report(label: str, report) -> None:
    r = report.recall_at
    print(f"{label:<10} recall@1 {r[1]:.4f}  recall@5 {r[5]:.4f}  recall@10 {r[10]:.4f}  mrr {report.mrr:.4f}")


def cmd_eval(args) -> int:
    queries = load_observations(args.queries)
    db_obs = load_observations(args.db)
    if args.baseline:
        matcher = retrieval_eval.make_baseline_matcher(db_obs)
        report = retrieval_eval.evaluate(queries, db_obs, matcher)
        label = "baseline"
    else:
        ckpt = encoder_net.read_checkpoint(args.checkpoint)
        if args.db_descriptors is not None:
            db = retrieval_eval.read_db(args.db_descriptors)
            if db.dim != ckpt.params.emb_dim:
                raise ConfigError(
                    f"descriptor db dim {db.dim} does not match checkpoint emb_dim {ckpt.params.emb_dim}"
                )
        else:
            db = retrieval_eval.embed_all(ckpt.params, db_obs)
        matcher = retrieval_eval.make_descriptor_matcher(ckpt.params, db)
        report = retrieval_eval.evaluate(queries, db, matcher)
        label = "model"
    _print_report(label, report)
    if args.out is not None:
        retrieval_eval.write_report(report, args.out)
        print(f"report -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Full reproduction pipeline
# ---------------------------------------------------------------------------


def _repro_eval_sets(obs, ratio: int, seed: int):
    """Validation observations restricted to poles seen in both sessions."""
    _, val = split_by_pole(obs, ratio, seed)
    eligible = {pid for pid in val.pole_ids() if len(val.sessions_of(pid)) >= 2}
    keep = [i for i, ob in enumerate(val.observations) if ob.pole_id in eligible]
    return val.subset(keep)


def _direction_sets(val_obs):
    sessions = sorted({ob.session_id for ob in val_obs.observations})
    if len(sessions) < 2:
        raise ConfigError("repro evaluation needs observations from at least 2 sessions")
    a, b = sessions[0], sessions[1]
    qa = val_obs.subset([i for i, ob in enumerate(val_obs.observations) if ob.session_id == a])
    qb = val_obs.subset([i for i, ob in enumerate(val_obs.observations) if ob.session_id == b])
    return (a, b), qa, qb


def _mean_report(r1, r2) -> dict:
    return {
        "recall_at": {str(k): (r1.recall_at[k] + r2.recall_at[k]) / 2 for k in sorted(r1.recall_at)},
        "mrr": (r1.mrr + r2.mrr) / 2,
    }


def cmd_repro(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = args.out
    stage = "setup"
    try:
        stage = "synth"
        os.makedirs(os.path.join(out, "clouds"), exist_ok=True)
        scene, truth = generate_scene(cfg.synth)
        write_scene(scene, os.path.join(out, "scene.json"))
        cloud_paths = []
        for k in range(cfg.sessions):
            path = os.path.join(out, "clouds", f"session_{k}.xyz")
            write_cloud(sample_session(scene, k), path)
            cloud_paths.append(path)
        print(f"[synth] {len(truth)} poles, {cfg.sessions} sessions")

        stage = "detect"
        os.makedirs(os.path.join(out, "detections"), exist_ok=True)
        detection_paths = []
        det_quality = []
        for k, cloud_path in enumerate(cloud_paths):
            cloud = read_cloud(cloud_path)
            detections = detect_poles(cloud, cfg.detector)
            _, precision, recall = associate_detections(detections, truth, cfg.association_tol)
            path = os.path.join(out, "detections", f"session_{k}.json")
            write_detections(detections, path)
            detection_paths.append(path)
            det_quality.append({"session": k, "precision": precision, "recall": recall})
            print(f"[detect] session {k}: {len(detections)} detections, precision {precision:.4f}, recall {recall:.4f}")

        stage = "render"
        manifests = {}
        for variant, canon in (("images", True), ("images_raw", False)):
            var_dir = os.path.join(out, variant)
            os.makedirs(var_dir, exist_ok=True)
            params = replace(cfg.image, canonicalize=canon)
            entries = []
            for k, (cloud_path, det_path) in enumerate(zip(cloud_paths, detection_paths)):
                cloud = read_cloud(cloud_path)
                for det in read_detections(det_path):
                    if det.pole_id < 0:
                        continue
                    img = render_pole_image(cloud, det, params)
                    name = f"pole{det.pole_id:05d}_s{cloud.session_id}.pgm"
                    write_pgm(img, os.path.join(var_dir, name))
                    entries.append((det.pole_id, cloud.session_id, name))
            manifest = os.path.join(var_dir, "manifest.tsv")
            write_manifest(entries, manifest)
            manifests[variant] = manifest
            print(f"[render] {variant}: {len(entries)} images")

        stage = "train"
        obs = load_observations(manifests["images"])
        os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)
        os.makedirs(os.path.join(out, "history"), exist_ok=True)
        results = {}
        for regime in ("cl", "sl"):
            tc = replace(cfg.train, regime=regime)
            ckpt_path = os.path.join(out, "checkpoints", f"{regime}.ckpt")
            hist_path = os.path.join(out, "history", f"{regime}.tsv")
            result = train(obs, tc, out_checkpoint=ckpt_path, out_history=hist_path)
            results[regime] = result
            final = result.history[-1][2] if result.history else float("nan")
            print(
                f"[train] {regime}: {tc.epochs} epochs, initial val recall@1 "
                f"{result.initial_val_recall:.4f} -> final {final:.4f}"
            )

        stage = "embed"
        os.makedirs(os.path.join(out, "descriptors"), exist_ok=True)
        for regime in ("cl", "sl"):
            by_session: dict[int, list[int]] = {}
            for i, ob in enumerate(obs.observations):
                by_session.setdefault(ob.session_id, []).append(i)
            for k in sorted(by_session):
                db = retrieval_eval.embed_all(results[regime].params, obs.subset(by_session[k]))
                retrieval_eval.write_db(db, os.path.join(out, "descriptors", f"{regime}_session{k}.pidb"))

        stage = "eval"
        os.makedirs(os.path.join(out, "reports"), exist_ok=True)
        val_canon = _repro_eval_sets(obs, cfg.train.split_ratio, cfg.train.seed)
        obs_raw = load_observations(manifests["images_raw"])
        val_raw = _repro_eval_sets(obs_raw, cfg.train.split_ratio, cfg.train.seed)
        (sa, sb), q_canon_a, q_canon_b = _direction_sets(val_canon)
        _, q_raw_a, q_raw_b = _direction_sets(val_raw)

        directions = {}
        table = {}
        for method in ("baseline", "sl", "cl"):
            if method == "baseline":
                r_ab = retrieval_eval.evaluate(q_raw_a, q_raw_b, retrieval_eval.make_baseline_matcher(q_raw_b))
                r_ba = retrieval_eval.evaluate(q_raw_b, q_raw_a, retrieval_eval.make_baseline_matcher(q_raw_a))
            else:
                params = results[method].params
                db_b = retrieval_eval.embed_all(params, q_canon_b)
                db_a = retrieval_eval.embed_all(params, q_canon_a)
                r_ab = retrieval_eval.evaluate(q_canon_a, db_b, retrieval_eval.make_descriptor_matcher(params, db_b))
                r_ba = retrieval_eval.evaluate(q_canon_b, db_a, retrieval_eval.make_descriptor_matcher(params, db_a))
            retrieval_eval.write_report(r_ab, os.path.join(out, "reports", f"{method}_s{sa}_to_s{sb}.json"))
            retrieval_eval.write_report(r_ba, os.path.join(out, "reports", f"{method}_s{sb}_to_s{sa}.json"))
            directions[method] = {
                f"s{sa}_to_s{sb}": {"recall_at": {str(k): v for k, v in r_ab.recall_at.items()}, "mrr": r_ab.mrr},
                f"s{sb}_to_s{sa}": {"recall_at": {str(k): v for k, v in r_ba.recall_at.items()}, "mrr": r_ba.mrr},
            }
            table[method] = _mean_report(r_ab, r_ba)

        summary = {
            "config": {
                "sessions": cfg.sessions,
                "n_poles": cfg.synth.n_poles,
                "epochs": cfg.train.epochs,
                "seed": cfg.synth.seed,
            },
            "detector_quality": det_quality,
            "val_queries": {f"session_{sa}": len(q_canon_a), f"session_{sb}": len(q_canon_b)},
            "initial_val_recall": {r: results[r].initial_val_recall for r in ("cl", "sl")},
            "final_val_recall": {
                r: (results[r].history[-1][2] if results[r].history else float("nan")) for r in ("cl", "sl")
            },
            "table": table,
            "directions": directions,
        }
        with open(os.path.join(out, "repro_report.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")

        print()
        print(f"{'method':<10} {'recall@1':>9} {'recall@5':>9} {'recall@10':>10} {'mrr':>7}")
        for method in ("baseline", "sl", "cl"):
            r = table[method]["recall_at"]
            print(f"{method:<10} {r['1']:>9.4f} {r['5']:>9.4f} {r['10']:>10.4f} {table[method]['mrr']:>7.4f}")
        return 0
    except Exception as exc:
        print(f"repro stage '{stage}' failed: {exc}", file=sys.stderr)
        return 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polesig",
        description="Pole-anchored polar signatures for cross-session LiDAR place recognition.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-session scene")
    p.add_argument("--out", required=True, help="output directory for clouds and scene.json")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--seed", type=int, help="override all nested seeds (default from config)")
    p.add_argument("--poles", type=int, help=f"number of poles (default {SynthConfig.n_poles})")
    p.add_argument("--sessions", type=int, help="number of sessions (default 2)")
    p.add_argument("--area-side", type=float, help=f"square area side in meters (default {SynthConfig.area_side})")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("detect", help="extract pole detections from a cloud file")
    p.add_argument("cloud", help="input point-cloud file")
    p.add_argument("--out", required=True, help="output detections JSON")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--truth", help="scene.json with ground truth; prints precision/recall and labels detections")
    p.add_argument("--tol", type=float, help="association tolerance in meters (default 0.5)")
    p.add_argument("--cell-size", type=float, help=f"grid cell size (default {DetectorParams.cell_size})")
    p.add_argument("--min-extent", type=float, help=f"min vertical extent (default {DetectorParams.min_vertical_extent})")
    p.add_argument("--max-rms", type=float, help=f"max horizontal RMS (default {DetectorParams.max_horizontal_rms})")
    p.add_argument("--min-support", type=int, help=f"min support points (default {DetectorParams.min_support_points})")
    p.add_argument("--merge-radius", type=float, help=f"detection merge radius (default {DetectorParams.merge_radius})")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("render", help="render polar occupancy images for detections")
    p.add_argument("cloud", help="input point-cloud file")
    p.add_argument("detections", help="detections JSON (unlabeled id<0 entries are skipped)")
    p.add_argument("--out", required=True, help="output directory for PGM images and manifest")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--manifest", default="manifest.tsv", help="manifest filename inside --out")
    p.add_argument("--append", action="store_true", help="append to an existing manifest")
    p.add_argument("--radius", type=float, help=f"crop radius in meters (default {PoleImageParams.radius})")
    p.add_argument("--z-min", type=float, help=f"lower z bound (default {PoleImageParams.z_min})")
    p.add_argument("--z-max", type=float, help=f"upper z bound (default {PoleImageParams.z_max})")
    p.add_argument("--rows", type=int, help=f"z bins (default {PoleImageParams.rows})")
    p.add_argument("--cols", type=int, help=f"theta bins (default {PoleImageParams.cols})")
    p.add_argument("--no-canonicalize", action="store_true", help="keep the raw theta origin")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", help="train a descriptor encoder from a manifest")
    p.add_argument("manifest", help="dataset manifest TSV")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--history", help="optional history TSV path")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--seed", type=int, help="override all nested seeds")
    p.add_argument("--regime", choices=("cl", "sl"), help="training regime (default cl)")
    p.add_argument("--epochs", type=int, help=f"epochs (default {TrainConfig.epochs})")
    p.add_argument("--lr", type=float, help=f"Adam learning rate (default {TrainConfig.lr})")
    p.add_argument("--temperature", type=float, help=f"contrastive temperature (default {TrainConfig.temperature})")
    p.add_argument("--batch-pole-ids", type=int, help=f"pole ids per contrastive batch (default {TrainConfig.batch_pole_ids})")
    p.add_argument("--sl-batch-pairs", type=int, help=f"pairs per supervised step (default {TrainConfig.sl_batch_pairs})")
    p.add_argument("--split-ratio", type=float, help=f"train fraction of pole ids (default {TrainConfig.split_ratio})")
    p.add_argument("--augment-shift", action="store_true", help="random circular column shift per view")
    p.add_argument("--emb-dim", type=int, help=f"descriptor size (default {TrainConfig.emb_dim})")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed a manifest into a descriptor database file")
    p.add_argument("manifest", help="dataset manifest TSV")
    p.add_argument("checkpoint", help="encoder checkpoint")
    p.add_argument("--out", required=True, help="output descriptor database (.pidb)")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="cross-session retrieval evaluation")
    p.add_argument("--queries", required=True, help="query manifest TSV")
    p.add_argument("--db", required=True, help="database manifest TSV")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint", help="encoder checkpoint for descriptor matching")
    group.add_argument("--baseline", action="store_true", help="shift-minimized Hamming image matching")
    p.add_argument("--db-descriptors", help="precomputed descriptor database (.pidb) for the db side")
    p.add_argument("--out", help="output report JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("repro", help="full pipeline: synth, detect, render, train CL+SL, eval all methods")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--seed", type=int, help="override all nested seeds")
    p.set_defaults(func=cmd_repro)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (PolesigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
