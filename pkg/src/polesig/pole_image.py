"""Pole-centric polar occupancy images.

All points within a fixed radius of a detected pole are expressed in
polar coordinates (r, theta, z) about the pole axis, and the (theta, z)
plane is rasterized into a binary grid: row = z bin (row 0 lowest),
column = theta bin.  Rotating the scene about the pole axis circularly
shifts the columns; canonicalization fixes a rotation-independent column
origin from the occupied-mass circular mean, turning that equivariance
into invariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ParseError
from .pole_detector import PoleDetection
from .scene_synth import PointCloud


@dataclass
class PoleImageParams:
    radius: float = 3.0
    z_min: float = 0.0
    z_max: float = 8.0
    rows: int = 80
    cols: int = 360
    canonicalize: bool = True

    def validate(self) -> None:
        if self.radius <= 0:
            raise ConfigError("radius must be positive")
        if self.z_max <= self.z_min:
            raise ConfigError("z_max must exceed z_min")
        if self.rows < 1 or self.cols < 1:
            raise ConfigError("rows and cols must be >= 1")


@dataclass
class PoleImage:
    grid: np.ndarray  # (rows, cols) uint8 in {0, 1}; row 0 = lowest z bin
    session_id: int
    params: PoleImageParams
    pole_id: int | None = None

    def __post_init__(self):
        grid = np.asarray(self.grid)
        if grid.shape != (self.params.rows, self.params.cols):
            raise ConfigError(
                f"grid shape {grid.shape} does not match params "
                f"({self.params.rows}, {self.params.cols})"
            )
        self.grid = (grid != 0).astype(np.uint8)


def to_polar(point, pole: PoleDetection) -> tuple[float, float, float]:
    """(r, theta in [0, 360) degrees, z above base) of a point about a pole.

    A point on the axis (r = 0) gets theta = 0 by convention.
    """
    dx = float(point[0]) - pole.center_x
    dy = float(point[1]) - pole.center_y
    r = math.hypot(dx, dy)
    theta = math.degrees(math.atan2(dy, dx)) % 360.0 if r > 0 else 0.0
    if theta >= 360.0:
        theta = 0.0
    return r, theta, float(point[2]) - pole.base_z


def render_pole_image(
    cloud: PointCloud,
    pole: PoleDetection,
    params: PoleImageParams | None = None,
) -> PoleImage:
    """Rasterize the pole's neighborhood into a binary (theta, z) grid."""
    if params is None:
        params = PoleImageParams()
    params.validate()

    grid = np.zeros((params.rows, params.cols), dtype=np.uint8)
    pts = cloud.points
    if len(pts):
        dx = pts[:, 0] - pole.center_x
        dy = pts[:, 1] - pole.center_y
        z = pts[:, 2] - pole.base_z
        r2 = dx * dx + dy * dy
        keep = (r2 <= params.radius**2) & (z >= params.z_min) & (z < params.z_max)
        if keep.any():
            dxk, dyk, zk = dx[keep], dy[keep], z[keep]
            theta = np.degrees(np.arctan2(dyk, dxk)) % 360.0
            theta[(theta >= 360.0) | (dxk**2 + dyk**2 == 0)] = 0.0
            dz = (params.z_max - params.z_min) / params.rows
            dtheta = 360.0 / params.cols
            rows = np.minimum((np.floor((zk - params.z_min) / dz)).astype(np.int64), params.rows - 1)
            cols = np.minimum((np.floor(theta / dtheta)).astype(np.int64), params.cols - 1)
            grid[rows, cols] = 1

    img = PoleImage(grid=grid, session_id=cloud.session_id, params=params, pole_id=pole.pole_id if pole.pole_id >= 0 else None)
    if params.canonicalize:
        img = canonicalize(img)
    return img


def occupancy_mean_vector(img: PoleImage) -> tuple[float, float]:
    """Sum of unit vectors at the column-center angles of occupied cells."""
    counts = img.grid.sum(axis=0, dtype=np.float64)
    dtheta = 360.0 / img.params.cols
    angles = np.radians((np.arange(img.params.cols) + 0.5) * dtheta)
    return float(np.dot(counts, np.cos(angles))), float(np.dot(counts, np.sin(angles)))


def canonicalize(img: PoleImage) -> PoleImage:
    """Circularly shift columns so the occupied-mass mean angle lands at column 0.

    The shift count is the mean angle in column units rounded to the
    nearest integer; exact half-column boundaries round down (with 1e-9
    slack) so a single occupied column maps onto column 0.  Images with
    |mean vector| <= 1e-9 (empty or perfectly balanced) are returned
    unchanged.
    """
    sx, sy = occupancy_mean_vector(img)
    if math.hypot(sx, sy) <= 1e-9:
        return replace(img, grid=img.grid.copy())
    angle = math.degrees(math.atan2(sy, sx)) % 360.0
    if angle >= 360.0:
        angle = 0.0
    dtheta = 360.0 / img.params.cols
    m = math.ceil(angle / dtheta - 0.5 - 1e-9)
    return replace(img, grid=np.roll(img.grid, -m % img.params.cols, axis=1))


def shift_columns(img: PoleImage, s: int) -> PoleImage:
    """Image with columns circularly shifted right by s."""
    return replace(img, grid=np.roll(img.grid, s, axis=1))


# ---------------------------------------------------------------------------
# PGM I/O
# ---------------------------------------------------------------------------


def write_pgm(img: PoleImage, path) -> None:
    """Binary PGM (P5), occupied = 255, metadata in comment lines."""
    p = img.params
    pid = "none" if img.pole_id is None else str(img.pole_id)
    header = (
        b"P5\n"
        + f"# pole_id {pid}\n".encode()
        + f"# session_id {img.session_id}\n".encode()
        + (
            f"# params radius={p.radius!r} z_min={p.z_min!r} z_max={p.z_max!r} "
            f"rows={p.rows} cols={p.cols} canonicalize={int(p.canonicalize)}\n"
        ).encode()
        + f"{p.cols} {p.rows}\n255\n".encode()
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write((img.grid * np.uint8(255)).tobytes())


def _tokenize_pgm_header(data: bytes, path) -> tuple[list[bytes], list[bytes], int]:
    """Return (3 tokens after the magic, comment lines, offset past header)."""
    tokens: list[bytes] = []
    comments: list[bytes] = []
    i = 2  # past the 2-byte magic
    n = len(data)
    while len(tokens) < 3:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i >= n:
            raise ParseError(f"{path}: truncated PGM header")
        if data[i : i + 1] == b"#":
            end = data.find(b"\n", i)
            if end == -1:
                raise ParseError(f"{path}: unterminated comment in header")
            comments.append(data[i:end])
            i = end + 1
            continue
        start = i
        while i < n and not data[i : i + 1].isspace():
            i += 1
        tokens.append(data[start:i])
    if i >= n:
        raise ParseError(f"{path}: no raster data after header")
    return tokens, comments, i + 1  # single whitespace after maxval


def read_pgm(path) -> PoleImage:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P5":
        raise ParseError(f"{path}: unsupported magic {data[:2]!r} (expected P5)")
    tokens, comments, offset = _tokenize_pgm_header(data, path)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ParseError(f"{path}: non-integer PGM dimensions") from None
    if not (0 < maxval <= 255):
        raise ParseError(f"{path}: unsupported maxval {maxval}")

    pole_id: int | None = None
    session_id = 0
    params = PoleImageParams(rows=height, cols=width)
    for raw in comments:
        text = raw[1:].strip().decode("utf-8", errors="replace")
        if text.startswith("pole_id "):
            value = text.split(None, 1)[1]
            pole_id = None if value == "none" else int(value)
        elif text.startswith("session_id "):
            session_id = int(text.split(None, 1)[1])
        elif text.startswith("params "):
            fields = dict(item.split("=", 1) for item in text.split()[1:])
            params = PoleImageParams(
                radius=float(fields["radius"]),
                z_min=float(fields["z_min"]),
                z_max=float(fields["z_max"]),
                rows=int(fields["rows"]),
                cols=int(fields["cols"]),
                canonicalize=bool(int(fields["canonicalize"])),
            )
            if params.rows != height or params.cols != width:
                raise ParseError(
                    f"{path}: declared params {params.rows}x{params.cols} "
                    f"disagree with PGM dimensions {height}x{width}"
                )

    expected = width * height
    raster = data[offset : offset + expected]
    if len(raster) != expected:
        raise ParseError(f"{path}: expected {expected} raster bytes, got {len(raster)}")
    grid = (np.frombuffer(raster, dtype=np.uint8).reshape(height, width) != 0).astype(np.uint8)
    return PoleImage(grid=grid, session_id=session_id, params=params, pole_id=pole_id)


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------


def write_manifest(entries: list[tuple[int, int, str]], path) -> None:
    """TSV rows of pole_id, session_id, image_path."""
    with open(path, "w", encoding="utf-8") as fh:
        for pole_id, session_id, image_path in entries:
            fh.write(f"{pole_id}\t{session_id}\t{image_path}\n")


def read_manifest(path) -> list[tuple[int, int, str]]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}: line {lineno}: expected 3 tab-separated fields")
            try:
                entries.append((int(parts[0]), int(parts[1]), parts[2]))
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: non-integer id field") from None
    return entries
