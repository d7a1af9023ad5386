"""Deterministic synthetic multi-session LiDAR scenes.

A scene is a set of vertical poles on a flat ground plane, each surrounded
by its own arrangement of clutter (boxes, wall segments, ellipsoidal
blobs) placed inside the signature radius.  Sessions re-sample every
surface with fresh point positions, per-object jitter, clutter dropout,
and sensor noise, standing in for repeated traversals of the same place.

All randomness flows through splitmix64 streams keyed by
(seed, purpose, indices); two runs with the same config produce
bit-identical output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, ParseError
from .rng import Stream

# Clutter lives in an annulus around its pole: far enough out that a
# detection grid cannot chain clutter cells to shaft cells even after
# per-session jitter displaces objects inward and sensor noise spills
# stray shaft points one cell outward, close enough in that the whole
# arrangement fits inside the signature radius.
SIGNATURE_RADIUS = 3.0
CLUTTER_INNER_RADIUS = 1.5

# Ground returns are sparse relative to object surfaces.
GROUND_DENSITY_RATIO = 1.0 / 40.0

# Shape ranges are chosen so clutter is geometrically separable from
# poles: boxes and walls are too wide to pass a thin-shaft test, blobs
# too squat to pass a vertical-extent test.  Tall shapes stay well above
# and short shapes well below a 1 m extent threshold so sensor noise
# cannot flip cells across it and carve off thin fragments.
BOX_SIDE_RANGE = (0.7, 1.05)
BOX_HEIGHT_RANGE = (1.4, 2.2)
WALL_LENGTH_RANGE = (1.2, 1.5)
WALL_HEIGHT_RANGE = (1.5, 3.0)
BLOB_HORIZ_RANGE = (0.4, 0.75)
BLOB_VERT_RANGE = (0.15, 0.3)

CLUTTER_KINDS = ("box", "wall", "blob")

# Point source labels returned by sample_session(with_labels=True).
LABEL_POLE = 0
LABEL_CLUTTER = 1
LABEL_GROUND = 2

_PLACEMENT_ATTEMPTS_PER_POLE = 1000


@dataclass
class PointCloud:
    """Points in meters (N x 3, z up) plus the session they belong to."""

    points: np.ndarray
    session_id: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class SynthConfig:
    n_poles: int = 200
    area_side: float = 160.0
    min_pole_separation: float = 8.0
    pole_radius_range: tuple[float, float] = (0.06, 0.20)
    pole_height_range: tuple[float, float] = (3.0, 6.0)
    clutter_objects_per_pole: tuple[int, int] = (3, 6)
    points_per_surface_unit: float = 200.0
    sensor_noise_sigma: float = 0.03
    session_dropout: float = 0.35
    session_jitter: float = 0.35
    seed: int = 0

    def validate(self) -> None:
        if self.n_poles < 1:
            raise ConfigError("n_poles must be >= 1")
        if self.area_side <= 0:
            raise ConfigError("area_side must be positive")
        if self.min_pole_separation <= 0:
            raise ConfigError("min_pole_separation must be positive")
        if self.points_per_surface_unit <= 0:
            raise ConfigError("points_per_surface_unit must be positive")
        if not (0.0 <= self.session_dropout < 1.0):
            raise ConfigError("session_dropout must lie in [0, 1)")
        if self.session_jitter < 0:
            raise ConfigError("session_jitter must be >= 0")
        if self.sensor_noise_sigma < 0:
            raise ConfigError("sensor_noise_sigma must be >= 0")
        for name in ("pole_radius_range", "pole_height_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi")
        lo, hi = self.clutter_objects_per_pole
        if not (0 <= lo <= hi):
            raise ConfigError("clutter_objects_per_pole must satisfy 0 <= lo <= hi")


@dataclass
class Pole:
    id: int
    x: float
    y: float
    radius: float
    height: float


@dataclass
class Clutter:
    kind: str
    pole_id: int
    cx: float
    cy: float
    yaw: float
    dims: dict[str, float] = field(default_factory=dict)


@dataclass
class Scene:
    poles: list[Pole]
    clutter: list[Clutter]
    config: SynthConfig

    def ground_truth(self) -> dict[int, tuple[float, float]]:
        """pole_id -> true ground-plane center; identical for all sessions."""
        return {p.id: (p.x, p.y) for p in self.poles}


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------


def _clutter_circumradius(c: Clutter) -> float:
    if c.kind == "box":
        return 0.5 * math.hypot(c.dims["sx"], c.dims["sy"])
    if c.kind == "wall":
        return 0.5 * c.dims["length"]
    return max(c.dims["ax"], c.dims["ay"])


def _draw_clutter(stream: Stream, pole: Pole) -> Clutter:
    kind = CLUTTER_KINDS[stream.integers(0, len(CLUTTER_KINDS))]
    if kind == "box":
        dims = {
            "sx": stream.uniform() * (BOX_SIDE_RANGE[1] - BOX_SIDE_RANGE[0]) + BOX_SIDE_RANGE[0],
            "sy": stream.uniform() * (BOX_SIDE_RANGE[1] - BOX_SIDE_RANGE[0]) + BOX_SIDE_RANGE[0],
            "h": stream.uniform() * (BOX_HEIGHT_RANGE[1] - BOX_HEIGHT_RANGE[0]) + BOX_HEIGHT_RANGE[0],
        }
        yaw = stream.uniform() * math.pi / 2
    elif kind == "wall":
        dims = {
            "length": stream.uniform() * (WALL_LENGTH_RANGE[1] - WALL_LENGTH_RANGE[0]) + WALL_LENGTH_RANGE[0],
            "height": stream.uniform() * (WALL_HEIGHT_RANGE[1] - WALL_HEIGHT_RANGE[0]) + WALL_HEIGHT_RANGE[0],
        }
        yaw = stream.uniform() * math.pi
    else:
        az = stream.uniform() * (BLOB_VERT_RANGE[1] - BLOB_VERT_RANGE[0]) + BLOB_VERT_RANGE[0]
        dims = {
            "ax": stream.uniform() * (BLOB_HORIZ_RANGE[1] - BLOB_HORIZ_RANGE[0]) + BLOB_HORIZ_RANGE[0],
            "ay": stream.uniform() * (BLOB_HORIZ_RANGE[1] - BLOB_HORIZ_RANGE[0]) + BLOB_HORIZ_RANGE[0],
            "az": az,
            "cz": az,  # resting on the ground, bottom tangent to z=0
        }
        yaw = stream.uniform() * math.pi
    obj = Clutter(kind=kind, pole_id=pole.id, cx=0.0, cy=0.0, yaw=yaw, dims=dims)
    circ = _clutter_circumradius(obj)
    r_lo = CLUTTER_INNER_RADIUS + circ
    r_hi = SIGNATURE_RADIUS - circ
    r = r_lo if r_hi <= r_lo else r_lo + stream.uniform() * (r_hi - r_lo)
    phi = stream.uniform() * 2 * math.pi
    obj.cx = pole.x + r * math.cos(phi)
    obj.cy = pole.y + r * math.sin(phi)
    return obj


def generate_scene(config: SynthConfig) -> tuple[Scene, dict[int, tuple[float, float]]]:
    """Place poles with the separation constraint and give each one clutter.

    Raises ConfigError if rejection sampling cannot satisfy the
    separation constraint within a bounded attempt budget.
    """
    config.validate()
    lo = SIGNATURE_RADIUS
    hi = config.area_side - SIGNATURE_RADIUS
    if hi < lo:
        raise ConfigError(
            f"area_side={config.area_side} leaves no room inside the "
            f"{SIGNATURE_RADIUS} m signature margin"
        )

    place = Stream(config.seed, "pole_placement")
    centers: list[tuple[float, float]] = []
    attempts = 0
    budget = _PLACEMENT_ATTEMPTS_PER_POLE * config.n_poles
    while len(centers) < config.n_poles:
        if attempts >= budget:
            raise ConfigError(
                f"could not place {config.n_poles} poles with separation "
                f">= {config.min_pole_separation} m in a {config.area_side} m "
                f"square after {budget} attempts"
            )
        attempts += 1
        x = lo + place.uniform() * (hi - lo)
        y = lo + place.uniform() * (hi - lo)
        ok = all(
            math.hypot(x - cx, y - cy) >= config.min_pole_separation
            for cx, cy in centers
        )
        if ok:
            centers.append((x, y))

    poles = []
    for pid, (x, y) in enumerate(centers):
        geom = Stream(config.seed, "pole_geom", pid)
        r0, r1 = config.pole_radius_range
        h0, h1 = config.pole_height_range
        poles.append(
            Pole(
                id=pid,
                x=x,
                y=y,
                radius=r0 + geom.uniform() * (r1 - r0),
                height=h0 + geom.uniform() * (h1 - h0),
            )
        )

    clutter: list[Clutter] = []
    c_lo, c_hi = config.clutter_objects_per_pole
    for pole in poles:
        plan = Stream(config.seed, "clutter", pole.id)
        n_obj = plan.integers(c_lo, c_hi + 1) if c_hi > c_lo else c_lo
        for _ in range(n_obj):
            clutter.append(_draw_clutter(plan, pole))

    scene = Scene(poles=poles, clutter=clutter, config=config)
    return scene, scene.ground_truth()


# ---------------------------------------------------------------------------
# Surface sampling
# ---------------------------------------------------------------------------


def _rot2(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def _sample_shaft(stream: Stream, pole: Pole, density: float) -> np.ndarray:
    area = 2 * math.pi * pole.radius * pole.height
    n = int(round(area * density))
    theta = stream.uniform(n) * 2 * math.pi
    z = stream.uniform(n) * pole.height
    x = pole.x + pole.radius * np.cos(theta)
    y = pole.y + pole.radius * np.sin(theta)
    return np.column_stack([x, y, z])


def _sample_box(stream: Stream, c: Clutter, density: float) -> np.ndarray:
    sx, sy, h = c.dims["sx"], c.dims["sy"], c.dims["h"]
    # four side faces plus the top; the bottom sits on the ground
    faces = [  # (area, sampler in local frame)
        (sx * h, lambda n: np.column_stack([stream.uniform(n) * sx - sx / 2, np.full(n, -sy / 2), stream.uniform(n) * h])),
        (sx * h, lambda n: np.column_stack([stream.uniform(n) * sx - sx / 2, np.full(n, sy / 2), stream.uniform(n) * h])),
        (sy * h, lambda n: np.column_stack([np.full(n, -sx / 2), stream.uniform(n) * sy - sy / 2, stream.uniform(n) * h])),
        (sy * h, lambda n: np.column_stack([np.full(n, sx / 2), stream.uniform(n) * sy - sy / 2, stream.uniform(n) * h])),
        (sx * sy, lambda n: np.column_stack([stream.uniform(n) * sx - sx / 2, stream.uniform(n) * sy - sy / 2, np.full(n, h)])),
    ]
    total = sum(a for a, _ in faces)
    n_total = int(round(total * density))
    parts = []
    allocated = 0
    for i, (a, sampler) in enumerate(faces):
        n = n_total - allocated if i == len(faces) - 1 else int(round(a / total * n_total))
        allocated += n
        parts.append(sampler(max(n, 0)))
    local = np.vstack(parts)
    xy = local[:, :2] @ _rot2(c.yaw).T
    return np.column_stack([xy[:, 0] + c.cx, xy[:, 1] + c.cy, local[:, 2]])


def _sample_wall(stream: Stream, c: Clutter, density: float) -> np.ndarray:
    length, height = c.dims["length"], c.dims["height"]
    n = int(round(length * height * density))
    u = stream.uniform(n) * length - length / 2
    z = stream.uniform(n) * height
    direction = np.array([math.cos(c.yaw), math.sin(c.yaw)])
    xy = np.outer(u, direction)
    return np.column_stack([xy[:, 0] + c.cx, xy[:, 1] + c.cy, z])


def _blob_area(ax: float, ay: float, az: float) -> float:
    # Thomsen approximation for ellipsoid surface area
    p = 1.6075
    return 4 * math.pi * (((ax * ay) ** p + (ax * az) ** p + (ay * az) ** p) / 3) ** (1 / p)


def _sample_blob(stream: Stream, c: Clutter, density: float) -> np.ndarray:
    ax, ay, az, cz = c.dims["ax"], c.dims["ay"], c.dims["az"], c.dims["cz"]
    n = int(round(_blob_area(ax, ay, az) * density))
    # directions on the sphere scaled by the semi-axes; approximately
    # uniform for the mild eccentricities used here
    v = stream.normal((n, 3))
    norms = np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
    v = v / norms * np.array([ax, ay, az])
    xy = v[:, :2] @ _rot2(c.yaw).T
    return np.column_stack([xy[:, 0] + c.cx, xy[:, 1] + c.cy, v[:, 2] + cz])


_CLUTTER_SAMPLERS = {"box": _sample_box, "wall": _sample_wall, "blob": _sample_blob}


def sample_session(
    scene: Scene,
    session_id: int,
    config: SynthConfig | None = None,
    with_labels: bool = False,
) -> PointCloud | tuple[PointCloud, np.ndarray]:
    """Sample one traversal of the scene.

    Every surface is re-sampled per session; clutter objects additionally
    get a per-session horizontal displacement (uniform in
    [-jitter, jitter]^2) and per-point dropout.  Pole shafts and ground
    are never dropped.  Gaussian sensor noise applies to all points.
    """
    cfg = config if config is not None else scene.config
    cfg.validate()
    seed = cfg.seed
    density = cfg.points_per_surface_unit

    chunks: list[np.ndarray] = []
    labels: list[np.ndarray] = []

    for pole in scene.poles:
        stream = Stream(seed, "shaft", session_id, pole.id)
        pts = _sample_shaft(stream, pole, density)
        chunks.append(pts)
        labels.append(np.full(len(pts), LABEL_POLE, dtype=np.int8))

    for idx, obj in enumerate(scene.clutter):
        stream = Stream(seed, "clutter_pts", session_id, idx)
        pts = _CLUTTER_SAMPLERS[obj.kind](stream, obj, density)
        if cfg.session_jitter > 0:
            jit = Stream(seed, "jitter", session_id, idx)
            pts = pts.copy()
            pts[:, 0] += (jit.uniform() * 2 - 1) * cfg.session_jitter
            pts[:, 1] += (jit.uniform() * 2 - 1) * cfg.session_jitter
        if cfg.session_dropout > 0 and len(pts):
            drop = Stream(seed, "dropout", session_id, idx)
            keep = drop.uniform(len(pts)) >= cfg.session_dropout
            pts = pts[keep]
        chunks.append(pts)
        labels.append(np.full(len(pts), LABEL_CLUTTER, dtype=np.int8))

    ground_stream = Stream(seed, "ground", session_id)
    n_ground = int(round(cfg.area_side**2 * density * GROUND_DENSITY_RATIO))
    gx = ground_stream.uniform(n_ground) * cfg.area_side
    gy = ground_stream.uniform(n_ground) * cfg.area_side
    ground = np.column_stack([gx, gy, np.zeros(n_ground)])
    chunks.append(ground)
    labels.append(np.full(n_ground, LABEL_GROUND, dtype=np.int8))

    points = np.vstack(chunks) if chunks else np.zeros((0, 3))
    if cfg.sensor_noise_sigma > 0 and len(points):
        noise = Stream(seed, "noise", session_id)
        points = points + noise.normal(points.shape) * cfg.sensor_noise_sigma

    cloud = PointCloud(points=points, session_id=session_id)
    if with_labels:
        return cloud, np.concatenate(labels) if labels else np.zeros(0, dtype=np.int8)
    return cloud


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def write_cloud(cloud: PointCloud, path) -> None:
    """ASCII cloud: header 'PCXYZ 1 <session_id> <count>', one x y z per line."""
    pts = cloud.points
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"PCXYZ 1 {cloud.session_id} {len(pts)}\n")
        fh.write("\n".join(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}" for p in pts))
        if len(pts):
            fh.write("\n")


def read_cloud(path) -> PointCloud:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        tokens = header.split()
        if len(tokens) != 4 or tokens[0] != "PCXYZ":
            raise ParseError(f"{path}: line 1: expected 'PCXYZ 1 <session_id> <count>' header")
        if tokens[1] != "1":
            raise ParseError(f"{path}: line 1: unsupported format version {tokens[1]!r}")
        try:
            session_id = int(tokens[2])
            count = int(tokens[3])
        except ValueError:
            raise ParseError(f"{path}: line 1: non-integer session id or count") from None
        if session_id < 0 or count < 0:
            raise ParseError(f"{path}: line 1: session id and count must be non-negative")

        if count == 0:
            return PointCloud(points=np.zeros((0, 3)), session_id=session_id)
        try:
            rows = np.loadtxt(fh, dtype=np.float64, ndmin=2)
        except ValueError:
            rows = None  # fall through to the diagnostic scan
        if rows is not None and rows.shape == (count, 3) and np.all(np.isfinite(rows)):
            return PointCloud(points=rows, session_id=session_id)
        if rows is not None and rows.shape[0] > count and rows.shape[1] == 3:
            raise ParseError(f"{path}: expected {count} points, found {rows.shape[0]}")

    # slow path: pinpoint the offending line for the error message
    with open(path, "r", encoding="utf-8") as fh:
        fh.readline()
        parsed = 0
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"{path}: line {lineno}: expected 3 values, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: non-numeric token") from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError(f"{path}: line {lineno}: non-finite coordinate")
            parsed += 1
        if parsed < count:
            raise ParseError(f"{path}: line {parsed + 2}: expected {count} points, file ended early")
        raise ParseError(f"{path}: expected {count} points, found {parsed}")


def write_scene(scene: Scene, path) -> None:
    payload = {
        "poles": [
            {"id": p.id, "x": p.x, "y": p.y, "radius": p.radius, "height": p.height}
            for p in scene.poles
        ],
        "clutter": [asdict(c) for c in scene.clutter],
        "config": _config_to_dict(scene.config),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def read_scene(path) -> Scene:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    try:
        poles = [Pole(**p) for p in payload["poles"]]
        clutter = [Clutter(**c) for c in payload.get("clutter", [])]
        config = config_from_dict(payload["config"])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed scene file: {exc}") from None
    return Scene(poles=poles, clutter=clutter, config=config)


def _config_to_dict(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    for key in ("pole_radius_range", "pole_height_range", "clutter_objects_per_pole"):
        d[key] = list(d[key])
    return d


def config_from_dict(d: dict) -> SynthConfig:
    known = set(SynthConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown synth config key(s): {sorted(unknown)}")
    kwargs = dict(d)
    for key in ("pole_radius_range", "pole_height_range", "clutter_objects_per_pole"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    cfg = SynthConfig(**kwargs)
    cfg.validate()
    return cfg
