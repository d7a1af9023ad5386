"""Shared fixtures: a small rendered corpus reused across training/eval/cli tests."""

import numpy as np
import pytest

import polesig as ps
from polesig.training import Observation, ObservationSet


def build_corpus(n_poles=14, area_side=50, seed=0, sessions=2, canonicalize=True):
    """Synth -> detect -> render, returning an in-memory observation set."""
    cfg = ps.SynthConfig(n_poles=n_poles, area_side=area_side, seed=seed)
    scene, truth = ps.generate_scene(cfg)
    params = ps.PoleImageParams(canonicalize=canonicalize)
    obs = []
    for session in range(sessions):
        cloud = ps.sample_session(scene, session)
        detections = ps.detect_poles(cloud)
        ps.associate_detections(detections, truth, 0.5)
        for det in detections:
            if det.pole_id < 0:
                continue
            obs.append(Observation(det.pole_id, session, ps.render_pole_image(cloud, det, params)))
    return ObservationSet(obs)


@pytest.fixture(scope="session")
def small_corpus():
    return build_corpus()


@pytest.fixture(scope="session")
def small_corpus_raw():
    return build_corpus(canonicalize=False)


def random_images(stream, n, rows=80, cols=360, fill=0.05):
    """Sparse random binary images from a polesig Stream."""
    return (stream.uniform((n, rows, cols)) < fill).astype(np.uint8)
