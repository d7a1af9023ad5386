"""Grid-and-cluster detector behavior on constructed and synthetic clouds."""

import numpy as np
import pytest

from polesig.errors import ConfigError
from polesig.pole_detector import (
    DetectorParams,
    PoleDetection,
    associate_detections,
    detect_poles,
    read_detections,
    write_detections,
)
from polesig.rng import Stream
from polesig.scene_synth import PointCloud, SynthConfig, generate_scene, sample_session


def _cylinder(cx, cy, radius, height, n, seed=0):
    st = Stream(seed, "cyl")
    theta = st.uniform(n) * 2 * np.pi
    z = st.uniform(n) * height
    return np.column_stack([cx + radius * np.cos(theta), cy + radius * np.sin(theta), z])


def _ground(side, n, seed=1):
    st = Stream(seed, "gnd")
    return np.column_stack([st.uniform(n) * side, st.uniform(n) * side, np.zeros(n)])


def test_empty_cloud():
    assert detect_poles(PointCloud(points=np.zeros((0, 3)), session_id=0)) == []


def test_single_cylinder_on_ground():
    pts = np.vstack([_cylinder(5.0, 5.0, 0.15, 4.0, 800), _ground(10.0, 500)])
    dets = detect_poles(PointCloud(points=pts, session_id=0))
    assert len(dets) == 1
    assert abs(dets[0].center_x - 5.0) <= 0.1
    assert abs(dets[0].center_y - 5.0) <= 0.1
    assert dets[0].vertical_extent >= 3.5


def test_wall_is_rejected():
    st = Stream(3, "wall")
    n = 4000
    x = st.uniform(n) * 6.0  # 6 m long
    z = st.uniform(n) * 3.0  # 3 m high
    pts = np.column_stack([x, np.full(n, 2.0), z])
    assert detect_poles(PointCloud(points=pts, session_id=0)) == []


def test_translation_equivariance_on_cell_multiples():
    pts = np.vstack([_cylinder(5.0, 5.0, 0.12, 3.0, 600), _ground(10.0, 300)])
    params = DetectorParams()
    base = detect_poles(PointCloud(points=pts, session_id=0), params)
    dx, dy = 4 * params.cell_size, -7 * params.cell_size
    moved = detect_poles(PointCloud(points=pts + np.array([dx, dy, 0.0]), session_id=0), params)
    assert len(base) == len(moved) == 1
    assert moved[0].center_x == pytest.approx(base[0].center_x + dx, abs=1e-9)
    assert moved[0].center_y == pytest.approx(base[0].center_y + dy, abs=1e-9)
    assert moved[0].support_count == base[0].support_count


def test_support_threshold_monotonicity():
    cfg = SynthConfig(n_poles=8, area_side=40, seed=6)
    scene, _ = generate_scene(cfg)
    cloud = sample_session(scene, 0)
    counts = []
    for min_support in (10, 30, 200, 400, 800):
        params = DetectorParams(min_support_points=min_support)
        counts.append(len(detect_poles(cloud, params)))
    assert counts == sorted(counts, reverse=True)


def test_detect_deterministic():
    cfg = SynthConfig(n_poles=6, area_side=40, seed=12)
    scene, _ = generate_scene(cfg)
    cloud = sample_session(scene, 0)
    a = detect_poles(cloud)
    b = detect_poles(cloud)
    assert [(d.center_x, d.center_y, d.base_z, d.vertical_extent, d.support_count) for d in a] == [
        (d.center_x, d.center_y, d.base_z, d.vertical_extent, d.support_count) for d in b
    ]


def test_nearby_detections_merge():
    # two thin shafts 0.6 m apart: separate clusters at cell 0.25, merged
    # once merge_radius covers the gap
    pts = np.vstack([_cylinder(2.0, 2.0, 0.05, 3.0, 500, seed=1), _cylinder(2.6, 2.0, 0.05, 3.0, 700, seed=2)])
    cloud = PointCloud(points=pts, session_id=0)
    split = detect_poles(cloud, DetectorParams(merge_radius=0.3))
    merged = detect_poles(cloud, DetectorParams(merge_radius=0.8))
    assert len(split) == 2
    assert len(merged) == 1
    assert merged[0].support_count == split[0].support_count + split[1].support_count
    # support-weighted centroid sits closer to the heavier shaft
    assert 2.3 < merged[0].center_x < 2.6


def test_params_validation():
    with pytest.raises(ConfigError):
        DetectorParams(cell_size=0).validate()
    with pytest.raises(ConfigError):
        DetectorParams(merge_radius=0.1).validate()


# -- association ------------------------------------------------------------


def _det(x, y):
    return PoleDetection(center_x=x, center_y=y, base_z=0.0, vertical_extent=3.0, support_count=100)


def test_associate_exact_positions():
    truth = {0: (1.0, 1.0), 1: (5.0, 5.0)}
    dets = [_det(1.0, 1.0), _det(5.0, 5.0)]
    matched, precision, recall = associate_detections(dets, truth, 0.5)
    assert precision == 1.0 and recall == 1.0
    assert dets[0].pole_id == 0 and dets[1].pole_id == 1


def test_associate_far_detection():
    matched, precision, recall = associate_detections([_det(10.0, 0.0)], {0: (0.0, 0.0)}, 0.5)
    assert matched == {} and precision == 0.0 and recall == 0.0


def test_associate_spurious_detection():
    truth = {0: (0.0, 0.0), 1: (6.0, 0.0)}
    dets = [_det(0.1, 0.0), _det(6.0, 0.1), _det(3.0, 3.0)]
    _, precision, recall = associate_detections(dets, truth, 0.5)
    assert precision == pytest.approx(2 / 3)
    assert recall == 1.0
    assert dets[2].pole_id == -1


def test_associate_one_to_one_greedy():
    # two detections near one truth pole: only the closer one matches
    truth = {0: (0.0, 0.0)}
    dets = [_det(0.2, 0.0), _det(0.1, 0.0)]
    matched, precision, recall = associate_detections(dets, truth, 0.5)
    assert matched == {1: 0}
    assert precision == 0.5 and recall == 1.0


def test_associate_requires_positive_tol():
    with pytest.raises(ValueError):
        associate_detections([], {}, 0.0)


def test_detections_file_roundtrip(tmp_path):
    dets = [_det(1.5, 2.5), _det(3.5, 4.5)]
    dets[0].pole_id = 7
    path = tmp_path / "dets.json"
    write_detections(dets, path)
    back = read_detections(path)
    assert len(back) == 2
    assert back[0].pole_id == 7 and back[1].pole_id == -1
    assert back[0].center_x == 1.5 and back[1].center_y == 4.5
