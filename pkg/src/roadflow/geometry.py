"""Vector geometry of directed road links.

A link is a directed 2-D segment from a start point to an end point.
This module computes link directions and lengths, ingests link geometry
from CSV, and classifies where the infinite extensions of two links meet
(the four-way positional relationship used by the positional graphs).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from roadflow.errors import DataError

SNAP_TOLERANCE = 1e-6  # meters; end-to-start coincidence for connectivity
PARALLEL_TOL = 1e-9  # radians; |sin(angle difference)| below this is parallel


@dataclass(frozen=True)
class Point2:
    """Planar point in projected meters."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise DataError(f"non-finite coordinates ({self.x}, {self.y})")


@dataclass(frozen=True)
class LinkVector:
    """Directed road segment with a dense integer id."""

    id: int
    start: Point2
    end: Point2

    def __post_init__(self):
        if self.start == self.end:
            raise DataError(f"link {self.id} has zero length")

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.end.x - self.start.x, self.end.y - self.start.y])


class PositionalClass(Enum):
    """Where the extended lines of an ordered link pair intersect.

    The first component is the side of link i (measured from its start
    along its direction), the second the side of link j.
    """

    NONE = 0  # parallel: no single intersection point
    P1 = 1  # backward_i, backward_j
    P2 = 2  # forward_i, forward_j
    P3 = 3  # forward_i, backward_j
    P4 = 4  # backward_i, forward_j


class LinkSet:
    """Ordered collection of links plus end-to-start connectivity."""

    def __init__(self, links: list[LinkVector], snap_tolerance: float = SNAP_TOLERANCE):
        ids = [ln.id for ln in links]
        if ids != list(range(len(links))):
            raise DataError("link ids must be exactly 0..N-1 in order")
        self.links = list(links)
        self.snap_tolerance = snap_tolerance
        self.connectivity = self._build_connectivity()

    def __len__(self) -> int:
        return len(self.links)

    def _build_connectivity(self) -> set[tuple[int, int]]:
        ends = np.array([[ln.end.x, ln.end.y] for ln in self.links])
        starts = np.array([[ln.start.x, ln.start.y] for ln in self.links])
        pairs = set()
        # N is desk-scale (<= a few hundred), the dense pass is fine
        for i in range(len(self.links)):
            d = np.hypot(starts[:, 0] - ends[i, 0], starts[:, 1] - ends[i, 1])
            for j in np.nonzero(d <= self.snap_tolerance)[0]:
                if j != i:
                    pairs.add((i, int(j)))
        return pairs

    def lengths(self) -> np.ndarray:
        return np.array([link_length(ln) for ln in self.links])

    def directions(self, convention: str = "standard") -> np.ndarray:
        return np.array([link_direction(ln, convention) for ln in self.links])


def link_length(link: LinkVector) -> float:
    """Euclidean length of the link in meters."""
    return float(np.hypot(*link.vector))


def link_direction(link: LinkVector, convention: str = "standard") -> float:
    """Planar angle of the link vector, in [0, 2*pi).

    ``standard`` is the counterclockwise angle from the +x axis.
    ``legacy_acos`` evaluates the acos-plus-halfplane-offset formula
    verbatim: acos(v.x/|v|) + ((sign(v.y)+1)/2)*pi with sign(0)=0.  The two
    conventions disagree on axis-aligned and lower-half-plane vectors;
    ``standard`` is the default.
    """
    v = link.vector
    n = float(np.hypot(*v))
    if n == 0.0:
        raise DataError(f"link {link.id} has zero length")
    if convention == "standard":
        return float(np.arctan2(v[1], v[0]) % (2.0 * math.pi))
    if convention == "legacy_acos":
        return float(math.acos(v[0] / n) + ((np.sign(v[1]) + 1.0) / 2.0) * math.pi)
    raise ValueError(f"unknown direction convention {convention!r}")


def classify_positional(
    link_i: LinkVector,
    link_j: LinkVector,
    parallel_tol: float = PARALLEL_TOL,
) -> PositionalClass:
    """Classify the intersection of the two extended link lines.

    Each line is parametrized from its start point along its unit
    direction.  The ray parameter sign on each line picks the forward or
    backward side; s == 0 or t == 0 counts as forward.  Parallel pairs
    (|sin| of the direction difference within ``parallel_tol``) get NONE.
    """
    ui = link_i.vector
    uj = link_j.vector
    ui = ui / np.hypot(*ui)
    uj = uj / np.hypot(*uj)
    cross = ui[0] * uj[1] - ui[1] * uj[0]  # sin of the angle between them
    if abs(cross) <= parallel_tol:
        return PositionalClass.NONE
    # start_i + s*ui == start_j + t*uj  -> 2x2 solve via Cramer's rule
    dx = link_j.start.x - link_i.start.x
    dy = link_j.start.y - link_i.start.y
    s = (dx * uj[1] - dy * uj[0]) / cross
    t = (dx * ui[1] - dy * ui[0]) / cross
    fwd_i = s >= 0.0
    fwd_j = t >= 0.0
    if fwd_i and fwd_j:
        return PositionalClass.P2
    if fwd_i:
        return PositionalClass.P3
    if fwd_j:
        return PositionalClass.P4
    return PositionalClass.P1


def load_links(path: str | Path, snap_tolerance: float = SNAP_TOLERANCE) -> LinkSet:
    """Read link geometry CSV: header ``id,start_x,start_y,end_x,end_y``."""
    path = Path(path)
    links = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["id", "start_x", "start_y", "end_x", "end_y"]
        if reader.fieldnames != expected:
            raise DataError(f"{path}: expected header {expected}, got {reader.fieldnames}")
        for row in reader:
            try:
                links.append(
                    LinkVector(
                        id=int(row["id"]),
                        start=Point2(float(row["start_x"]), float(row["start_y"])),
                        end=Point2(float(row["end_x"]), float(row["end_y"])),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}: bad row {row!r}: {exc}") from exc
    return LinkSet(links, snap_tolerance=snap_tolerance)


def save_links(links: LinkSet, path: str | Path) -> None:
    """Write link geometry CSV in the format ``load_links`` reads."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "start_x", "start_y", "end_x", "end_y"])
        for ln in links.links:
            writer.writerow([ln.id, ln.start.x, ln.start.y, ln.end.x, ln.end.y])
