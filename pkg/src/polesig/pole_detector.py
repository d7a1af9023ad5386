"""Vertical pole extraction from point clouds.

Grid-and-cluster heuristic: bin points into an x-y grid, keep cells whose
vertical extent is pole-like, connect candidate cells 8-ways, and accept
clusters that are thin (small horizontal RMS about their centroid) and
well supported.  Flat ground never forms candidate cells, so no ground
removal pass is needed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParseError
from .scene_synth import PointCloud


@dataclass
class DetectorParams:
    cell_size: float = 0.25
    min_vertical_extent: float = 1.0
    max_horizontal_rms: float = 0.30
    min_support_points: int = 30
    merge_radius: float = 0.5

    def validate(self) -> None:
        for name in ("cell_size", "min_vertical_extent", "max_horizontal_rms", "merge_radius"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.min_support_points <= 0:
            raise ConfigError("min_support_points must be positive")
        if self.merge_radius < self.cell_size:
            raise ConfigError("merge_radius must be >= cell_size")


@dataclass
class PoleDetection:
    center_x: float
    center_y: float
    base_z: float
    vertical_extent: float
    support_count: int
    pole_id: int = -1  # assigned by association; -1 = unlabeled


def detect_poles(cloud: PointCloud, params: DetectorParams | None = None) -> list[PoleDetection]:
    """Extract pole detections; output sorted by (center_x, center_y)."""
    if params is None:
        params = DetectorParams()
    params.validate()
    pts = cloud.points
    if len(pts) == 0:
        return []

    # bin into the x-y grid
    ix = np.floor(pts[:, 0] / params.cell_size).astype(np.int64)
    iy = np.floor(pts[:, 1] / params.cell_size).astype(np.int64)
    cells, inverse = np.unique(np.column_stack([ix, iy]), axis=0, return_inverse=True)

    z = pts[:, 2]
    n_cells = len(cells)
    z_min = np.full(n_cells, np.inf)
    z_max = np.full(n_cells, -np.inf)
    np.minimum.at(z_min, inverse, z)
    np.maximum.at(z_max, inverse, z)
    candidate = (z_max - z_min) >= params.min_vertical_extent
    if not candidate.any():
        return []

    cand_idx = np.nonzero(candidate)[0]
    cell_lookup = {(int(cells[i, 0]), int(cells[i, 1])): int(i) for i in cand_idx}

    # 8-connected clusters of candidate cells
    cluster_of: dict[int, int] = {}
    clusters: list[list[int]] = []
    for i in cand_idx:
        i = int(i)
        if i in cluster_of:
            continue
        cid = len(clusters)
        stack = [i]
        cluster_of[i] = cid
        members = []
        while stack:
            j = stack.pop()
            members.append(j)
            cx, cy = int(cells[j, 0]), int(cells[j, 1])
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    if dx == 0 and dy == 0:
                        continue
                    nb = cell_lookup.get((cx + dx, cy + dy))
                    if nb is not None and nb not in cluster_of:
                        cluster_of[nb] = cid
                        stack.append(nb)
        clusters.append(members)

    # per-point cluster assignment (-1 for points outside candidate cells)
    point_cluster = np.full(len(pts), -1, dtype=np.int64)
    cell_cluster = np.full(n_cells, -1, dtype=np.int64)
    for cid, members in enumerate(clusters):
        cell_cluster[members] = cid
    point_cluster = cell_cluster[inverse]

    detections: list[PoleDetection] = []
    for cid in range(len(clusters)):
        mask = point_cluster == cid
        n = int(mask.sum())
        if n < params.min_support_points:
            continue
        cx = float(pts[mask, 0].mean())
        cy = float(pts[mask, 1].mean())
        rms = math.sqrt(float(((pts[mask, 0] - cx) ** 2 + (pts[mask, 1] - cy) ** 2).mean()))
        if rms > params.max_horizontal_rms:
            continue
        zc = pts[mask, 2]
        detections.append(
            PoleDetection(
                center_x=cx,
                center_y=cy,
                base_z=float(zc.min()),
                vertical_extent=float(zc.max() - zc.min()),
                support_count=n,
            )
        )

    detections = _merge_close(detections, params.merge_radius)
    detections.sort(key=lambda d: (d.center_x, d.center_y))
    return detections


def _merge_close(detections: list[PoleDetection], merge_radius: float) -> list[PoleDetection]:
    """Merge detection groups whose centroids chain within merge_radius."""
    n = len(detections)
    if n <= 1:
        return detections
    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in range(i + 1, n):
            di, dj = detections[i], detections[j]
            if math.hypot(di.center_x - dj.center_x, di.center_y - dj.center_y) <= merge_radius:
                parent[find(i)] = find(j)

    groups: dict[int, list[PoleDetection]] = {}
    for i, det in enumerate(detections):
        groups.setdefault(find(i), []).append(det)

    merged = []
    for members in groups.values():
        if len(members) == 1:
            merged.append(members[0])
            continue
        w = np.array([m.support_count for m in members], dtype=np.float64)
        base = min(m.base_z for m in members)
        top = max(m.base_z + m.vertical_extent for m in members)
        merged.append(
            PoleDetection(
                center_x=float(np.average([m.center_x for m in members], weights=w)),
                center_y=float(np.average([m.center_y for m in members], weights=w)),
                base_z=base,
                vertical_extent=top - base,
                support_count=int(w.sum()),
            )
        )
    return merged


def associate_detections(
    detections: list[PoleDetection],
    truth: dict[int, tuple[float, float]],
    tol: float,
) -> tuple[dict[int, int], float, float]:
    """Greedy nearest-neighbor matching of detections to true poles.

    Pairs are taken in ascending distance order; each detection and each
    truth pole is used at most once; pairs farther than tol are left
    unmatched.  Matched detections get their pole_id set in place.

    Returns (detection index -> pole_id, precision, recall).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    pairs = []
    truth_items = sorted(truth.items())
    for di, det in enumerate(detections):
        for pid, (tx, ty) in truth_items:
            dist = math.hypot(det.center_x - tx, det.center_y - ty)
            if dist <= tol:
                pairs.append((dist, di, pid))
    pairs.sort()

    matched: dict[int, int] = {}
    used_truth: set[int] = set()
    for _, di, pid in pairs:
        if di in matched or pid in used_truth:
            continue
        matched[di] = pid
        used_truth.add(pid)
        detections[di].pole_id = pid

    precision = len(matched) / len(detections) if detections else 0.0
    recall = len(matched) / len(truth) if truth else 0.0
    return matched, precision, recall


def write_detections(detections: list[PoleDetection], path) -> None:
    """JSON list of {id, x, y, base_z, extent, support}."""
    payload = [
        {
            "id": d.pole_id,
            "x": d.center_x,
            "y": d.center_y,
            "base_z": d.base_z,
            "extent": d.vertical_extent,
            "support": d.support_count,
        }
        for d in detections
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def read_detections(path) -> list[PoleDetection]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if not isinstance(payload, list):
        raise ParseError(f"{path}: expected a JSON list of detections")
    out = []
    for i, rec in enumerate(payload):
        try:
            out.append(
                PoleDetection(
                    center_x=float(rec["x"]),
                    center_y=float(rec["y"]),
                    base_z=float(rec["base_z"]),
                    vertical_extent=float(rec["extent"]),
                    support_count=int(rec["support"]),
                    pole_id=int(rec["id"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: record {i}: {exc}") from None
    return out
