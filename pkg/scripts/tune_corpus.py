#!/usr/bin/env python3
"""Knob-tuning harness: build a corpus, report baseline / CL / SL recalls."""

import argparse
import sys
import time

import numpy as np

import polesig as ps
from polesig import retrieval_eval as re
from polesig.training import Observation, ObservationSet, TrainConfig, split_by_pole, train


def build_corpus(cfg, sessions=2, tol=0.5):
    scene, truth = ps.generate_scene(cfg)
    canon_obs, raw_obs = [], []
    det_stats = []
    for session in range(sessions):
        cloud = ps.sample_session(scene, session)
        dets = ps.detect_poles(cloud)
        _, p, r = ps.associate_detections(dets, truth, tol)
        det_stats.append((p, r))
        for det in dets:
            if det.pole_id < 0:
                continue
            canon_obs.append(Observation(det.pole_id, session, ps.render_pole_image(cloud, det, ps.PoleImageParams(canonicalize=True))))
            raw_obs.append(Observation(det.pole_id, session, ps.render_pole_image(cloud, det, ps.PoleImageParams(canonicalize=False))))
    return ObservationSet(canon_obs), ObservationSet(raw_obs), det_stats


def val_directions(obs, ratio, seed):
    _, val = split_by_pole(obs, ratio, seed)
    elig = {p for p in val.pole_ids() if len(val.sessions_of(p)) >= 2}
    keep = [i for i, ob in enumerate(val.observations) if ob.pole_id in elig]
    v = val.subset(keep)
    a = v.subset([i for i, ob in enumerate(v.observations) if ob.session_id == 0])
    b = v.subset([i for i, ob in enumerate(v.observations) if ob.session_id == 1])
    return a, b


def mean_r1(ra, rb):
    return (ra.recall_at[1] + rb.recall_at[1]) / 2


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--poles", type=int, default=200)
    ap.add_argument("--area", type=float, default=160.0)
    ap.add_argument("--dropout", type=float, default=0.30)
    ap.add_argument("--jitter", type=float, default=0.15)
    ap.add_argument("--noise", type=float, default=0.02)
    ap.add_argument("--density", type=float, default=200.0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--skip-sl", action="store_true")
    args = ap.parse_args()

    cfg = ps.SynthConfig(
        n_poles=args.poles,
        area_side=args.area,
        session_dropout=args.dropout,
        session_jitter=args.jitter,
        sensor_noise_sigma=args.noise,
        points_per_surface_unit=args.density,
        seed=args.seed,
    )
    t0 = time.time()
    canon, raw, det_stats = build_corpus(cfg)
    print(f"corpus: {len(canon)} obs, det P/R {det_stats}  ({time.time()-t0:.0f}s)", flush=True)

    qa_r, qb_r = val_directions(raw, 0.8, args.seed)
    r_ab = re.evaluate(qa_r, qb_r, re.make_baseline_matcher(qb_r))
    r_ba = re.evaluate(qb_r, qa_r, re.make_baseline_matcher(qa_r))
    print(f"baseline R@1 {mean_r1(r_ab, r_ba):.3f}  (dirs {r_ab.recall_at[1]:.3f}/{r_ba.recall_at[1]:.3f}, mrr {(r_ab.mrr+r_ba.mrr)/2:.3f})", flush=True)

    for regime in ["cl"] + ([] if args.skip_sl else ["sl"]):
        tc = TrainConfig(regime=regime, epochs=args.epochs, seed=args.seed)
        t0 = time.time()
        res = train(canon, tc)
        hist = res.history
        final = hist[-1][2] if hist else float("nan")
        print(f"{regime}: init R@1 {res.initial_val_recall:.3f} -> final {final:.3f}  ({time.time()-t0:.0f}s)", flush=True)
        marks = [0, len(hist) // 4, len(hist) // 2, 3 * len(hist) // 4, len(hist) - 1]
        for i in sorted(set(marks)):
            e, l, r = hist[i]
            print(f"   epoch {e:2d}: loss {l:.4f} val R@1 {r:.3f}", flush=True)


if __name__ == "__main__":
    sys.exit(main())
