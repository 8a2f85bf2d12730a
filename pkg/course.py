"""
Course ingestion: elevation data (CSV or GPX) resampled onto a fixed
distance step with one slope angle per interval.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import gpxpy
import gpxpy.gpx
import numpy as np
import pandas as pd

from errors import InputError
from utils import PathLike

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6371000.0
_LENGTH_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class CourseProfile:
    dx: float
    theta: np.ndarray
    elevation_start: np.ndarray
    end_elevation: Optional[float] = None
    source: str = field(default="course", compare=False)

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        elevation = np.asarray(self.elevation_start, dtype=float)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "elevation_start", elevation)
        if not self.dx > 0:
            raise InputError(f"interval length must be > 0, got {self.dx}", source=self.source)
        if theta.shape != elevation.shape or theta.ndim != 1:
            raise InputError("slope and elevation columns must be 1-D and equally long", source=self.source)
        if np.any(np.abs(theta) >= math.pi / 2) or not np.all(np.isfinite(theta)):
            raise InputError("slope angles must be finite and within (-pi/2, pi/2)", source=self.source)

    @property
    def n_intervals(self) -> int:
        return int(self.theta.size)

    @property
    def total_length(self) -> float:
        return self.dx * self.n_intervals

    @property
    def elevation_end(self) -> float:
        if self.end_elevation is not None:
            return float(self.end_elevation)
        return float(self.elevation_start[-1] + self.dx * math.tan(self.theta[-1]))

    def stage_at(self, x: float) -> int:
        """Index of the interval containing distance x (the last one at the finish)"""
        stage = int(math.floor(x / self.dx)) if x > 0 else 0
        return min(stage, self.n_intervals - 1)

    def theta_at(self, x: float) -> float:
        return float(self.theta[self.stage_at(x)])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "interval_index": np.arange(self.n_intervals),
                "theta_rad": self.theta,
                "elevation_m": self.elevation_start,
            }
        )

    def canonical(self) -> dict:
        return {
            "dx": float(self.dx),
            "theta": [float(v) for v in self.theta],
            "elevation_start": [float(v) for v in self.elevation_start],
        }


def _smooth(elevation: np.ndarray, window: int) -> np.ndarray:
    if window <= 1:
        return elevation
    return pd.Series(elevation).rolling(window, center=True, min_periods=1).mean().to_numpy()


def load_profile(
    points: Sequence[Tuple[float, float]], dx: float, smoothing_window: int = 1, source: str = "course"
) -> CourseProfile:
    """Resample (distance, elevation) points onto a dx grid.

    A final partial interval is padded to a full dx by extending its grade.
    """
    if not dx > 0:
        raise InputError(f"interval length must be > 0, got {dx}", source=source)
    data = np.asarray(points, dtype=float)
    if data.size == 0:
        raise InputError("course has no points", source=source)
    data = data.reshape(-1, 2)
    if data.shape[0] < 2:
        raise InputError("course needs at least 2 points", source=source)
    distance, elevation = data[:, 0], data[:, 1]
    bad = np.flatnonzero(~np.isfinite(distance) | ~np.isfinite(elevation))
    if bad.size:
        raise InputError("non-numeric distance or elevation", source=source, record=int(bad[0]))
    if distance[0] != 0:
        raise InputError(f"distance must start at 0, got {distance[0]}", source=source, record=0)
    steps = np.flatnonzero(np.diff(distance) <= 0)
    if steps.size:
        raise InputError("distance must be strictly increasing", source=source, record=int(steps[0] + 1))

    length = float(distance[-1])
    n = max(1, math.ceil(length / dx - _LENGTH_TOL))
    grid = np.arange(n + 1) * dx
    grid_e = np.interp(grid, distance, elevation)

    partial = length - (n - 1) * dx
    if partial < dx - _LENGTH_TOL * dx:
        grade = (elevation[-1] - grid_e[n - 1]) / partial
        grid_e[n] = grid_e[n - 1] + grade * dx
        logger.info("Padded final %.1f m interval of %s to %.1f m", partial, source, dx)

    grid_e = _smooth(grid_e, smoothing_window)
    theta = np.arctan(np.diff(grid_e) / dx)
    logger.debug("Resampled %s: %d intervals of %.1f m", source, n, dx)
    return CourseProfile(
        dx=dx, theta=theta, elevation_start=grid_e[:-1], end_elevation=float(grid_e[-1]), source=source
    )


def haversine_distances(lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
    """Great-circle lengths of consecutive legs on a spherical earth"""
    phi = np.radians(lat)
    lam = np.radians(lon)
    dphi = np.diff(phi)
    dlam = np.diff(lam)
    a = np.sin(dphi / 2) ** 2 + np.cos(phi[:-1]) * np.cos(phi[1:]) * np.sin(dlam / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arctan2(np.sqrt(a), np.sqrt(1 - a))


def load_gpx(track, dx: float, smoothing_window: int = 1, source: str = "gpx") -> CourseProfile:
    """Build a profile from GPX trackpoints (document text, file object or parsed GPX)"""
    if isinstance(track, gpxpy.gpx.GPX):
        gpx = track
    else:
        try:
            gpx = gpxpy.parse(track)
        except gpxpy.gpx.GPXException as e:
            raise InputError(f"unreadable GPX: {e}", source=source)

    lat, lon, ele = [], [], []
    for trk in gpx.tracks:
        for segment in trk.segments:
            for point in segment.points:
                if point.elevation is None:
                    raise InputError("trackpoint without elevation", source=source, record=len(lat))
                lat.append(point.latitude)
                lon.append(point.longitude)
                ele.append(point.elevation)
    if len(lat) < 2:
        raise InputError(f"need at least 2 trackpoints, got {len(lat)}", source=source)

    legs = haversine_distances(np.asarray(lat), np.asarray(lon))
    moving = np.concatenate([[True], legs > 0])
    distance = np.concatenate([[0.0], np.cumsum(legs)])[moving]
    elevation = np.asarray(ele, dtype=float)[moving]
    if distance[-1] <= 0:
        raise InputError("track has zero length", source=source)
    if not moving.all():
        logger.debug("Dropped %d repeated trackpoints from %s", int((~moving).sum()), source)
    return load_profile(np.column_stack([distance, elevation]), dx, smoothing_window, source=source)


def read_profile_csv(path: PathLike, dx: float) -> CourseProfile:
    """Re-import an emitted interval_index,theta_rad,elevation_m profile"""
    path = Path(path)
    df = pd.read_csv(path, float_precision="round_trip")
    missing = {"interval_index", "theta_rad", "elevation_m"} - set(df.columns)
    if missing:
        raise InputError(f"missing columns {sorted(missing)}", source=str(path))
    order = df["interval_index"].to_numpy()
    if not np.array_equal(order, np.arange(len(df))):
        raise InputError("interval_index must count up from 0", source=str(path))
    return CourseProfile(
        dx=dx,
        theta=df["theta_rad"].to_numpy(dtype=float),
        elevation_start=df["elevation_m"].to_numpy(dtype=float),
        source=str(path),
    )


def write_profile_csv(profile: CourseProfile, path: PathLike) -> None:
    profile.to_frame().to_csv(path, index=False)


def load_course(path: PathLike, dx: float, smoothing_window: int = 1) -> CourseProfile:
    """Load a course from GPX, a distance/elevation CSV or an emitted profile CSV"""
    path = Path(path)
    if not path.exists():
        raise InputError("file not found", source=str(path))
    if path.suffix.lower() == ".gpx":
        with open(path, encoding="utf-8") as f:
            return load_gpx(f, dx, smoothing_window, source=str(path))

    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"unreadable CSV: {e}", source=str(path))
    if {"interval_index", "theta_rad", "elevation_m"} <= set(df.columns):
        return read_profile_csv(path, dx)
    if not {"distance_m", "elevation_m"} <= set(df.columns):
        raise InputError("header must be distance_m,elevation_m", source=str(path))
    points = np.column_stack(
        [
            pd.to_numeric(df["distance_m"], errors="coerce").to_numpy(dtype=float),
            pd.to_numeric(df["elevation_m"], errors="coerce").to_numpy(dtype=float),
        ]
    )
    return load_profile(points, dx, smoothing_window, source=str(path))
