"""Candidate quad enumeration, geometric filtering, and rectification.

Candidate quads connect four detected corners that may bound a coded white
square. Each quad is convex, ordered clockwise in image coordinates (y down),
unique as an unordered index set, and carries a homography into the
standardized square: a 64x64 target centered in a 104x104 frame, inner corners
at (20,20), (84,20), (84,84), (20,84).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Homography, homography_from_4pts

INNER_SQUARE = np.array([[20.0, 20.0], [84.0, 20.0], [84.0, 84.0], [20.0, 84.0]])
STANDARDIZED_SIZE = 104

__all__ = [
    "Corner2D",
    "CandidateQuad",
    "QuadFilterConfig",
    "geometric_filter",
    "enumerate_candidates",
    "orientations",
    "signed_area",
    "is_convex_clockwise",
]


@dataclass
class Corner2D:
    """A detected checkerboard-like corner: subpixel position and confidence."""

    position: np.ndarray
    confidence: float = 1.0
    provisional_id: int | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(2)


@dataclass
class QuadFilterConfig:
    """Geometric acceptance intervals for candidate quads (pixels / degrees)."""

    bbox_radius: float = 120.0
    min_area: float = 64.0
    max_area: float = 20000.0
    min_edge: float = 6.0
    max_edge: float = 220.0
    min_angle: float = 25.0
    max_angle: float = 155.0

    def __post_init__(self):
        pairs = [
            (self.min_area, self.max_area),
            (self.min_edge, self.max_edge),
            (self.min_angle, self.max_angle),
        ]
        if any(lo >= hi for lo, hi in pairs) or any(v <= 0 for v in vars(self).values()):
            raise ValueError("filter bounds must be positive with min < max")

    @classmethod
    def from_quad_statistics(cls, quads, slack: float = 0.5) -> "QuadFilterConfig":
        """Conservative intervals derived from known-good quads, widened by `slack`."""
        quads = np.asarray(quads, dtype=float)
        areas, edges, angles, spans = [], [], [], []
        for q in quads:
            areas.append(abs(signed_area(q)))
            e = np.linalg.norm(np.roll(q, -1, axis=0) - q, axis=1)
            edges.extend(e)
            angles.extend(_interior_angles(q))
            d = q[:, None, :] - q[None, :, :]
            spans.append(np.abs(d).max())
        lo, hi = 1.0 - slack, 1.0 + slack
        return cls(
            bbox_radius=float(np.max(spans) * hi),
            min_area=float(np.min(areas) * lo),
            max_area=float(np.max(areas) * hi),
            min_edge=float(np.min(edges) * lo),
            max_edge=float(np.max(edges) * hi),
            min_angle=max(float(np.min(angles) * lo), 1.0),
            max_angle=min(float(np.max(angles) * hi), 179.0),
        )


@dataclass
class CandidateQuad:
    """Four corner indices, clockwise, with the rectifying homography for one orientation."""

    corner_indices: tuple[int, int, int, int]
    orientation: int
    homography: Homography
    points: np.ndarray = field(repr=False)


def signed_area(pts) -> float:
    """Trapezoid-form shoelace area; negative for clockwise order in image coords (y down)."""
    pts = np.asarray(pts, dtype=float)
    x = pts[:, 0]
    y = pts[:, 1]
    xn = np.roll(x, -1)
    yn = np.roll(y, -1)
    return 0.5 * float(np.sum((xn - x) * (yn + y)))


def _cross_signs(pts):
    d = np.roll(pts, -1, axis=0) - pts
    dn = np.roll(d, -1, axis=0)
    return d[:, 0] * dn[:, 1] - d[:, 1] * dn[:, 0]


def is_convex_clockwise(pts) -> bool:
    """Convexity via consistent cross-product sign, clockwise via negative shoelace area."""
    cross = _cross_signs(np.asarray(pts, dtype=float))
    if np.any(cross == 0.0):
        return False
    if not (np.all(cross > 0) or np.all(cross < 0)):
        return False
    return signed_area(pts) < 0


def _interior_angles(pts):
    prev = np.roll(pts, 1, axis=0) - pts
    nxt = np.roll(pts, -1, axis=0) - pts
    dot = np.sum(prev * nxt, axis=1)
    cross = prev[:, 0] * nxt[:, 1] - prev[:, 1] * nxt[:, 0]
    return np.degrees(np.abs(np.arctan2(cross, dot)))


def geometric_filter(pts, cfg: QuadFilterConfig) -> bool:
    """True iff the 4 points are convex, clockwise, and within the config intervals."""
    pts = np.asarray(pts, dtype=float).reshape(4, 2)
    if not is_convex_clockwise(pts):
        return False
    area = -signed_area(pts)
    if not cfg.min_area <= area <= cfg.max_area:
        return False
    e = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
    if e.min() < cfg.min_edge or e.max() > cfg.max_edge:
        return False
    ang = _interior_angles(pts)
    return bool(ang.min() >= cfg.min_angle and ang.max() <= cfg.max_angle)


def _clockwise_order(pts):
    """Indices ordering 4 points clockwise (image coords) around their centroid."""
    c = pts.mean(axis=0)
    ang = np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0])
    # ascending atan2 in y-down coordinates traces the points clockwise on screen
    return np.argsort(ang)


def enumerate_candidates(corners, cfg: QuadFilterConfig, quad_stats=None) -> list[CandidateQuad]:
    """All filtered candidate quads over the detected corners (orientation 0 only).

    For each corner, the three partners are drawn from the corners inside its
    `bbox_radius` box; quads are deduplicated by their sorted index 4-tuple. The
    returned ordering starts each quad at its smallest corner index, so output
    is independent of input corner ordering as a set.

    `quad_stats`, when given, is called with the clockwise (4, 2) point array of
    each geometrically valid quad and may veto it by returning False. This is
    the hook for image-based acceptance criteria (patch intensity statistics),
    which live with the detector, not in this geometry-only core.
    """
    pos = np.array([c.position for c in corners], dtype=float).reshape(-1, 2)
    n = len(pos)
    if n < 4:
        return []
    seen = {}
    r = cfg.bbox_radius
    for i in range(n):
        d = np.abs(pos - pos[i])
        near = np.where((d[:, 0] <= r) & (d[:, 1] <= r))[0]
        near = near[near != i]
        for trio in itertools.combinations(near.tolist(), 3):
            key = tuple(sorted((i, *trio)))
            if key not in seen:
                seen[key] = _build_candidate(pos, key, cfg, quad_stats)
    return [seen[k] for k in sorted(seen) if seen[k] is not None]


def _build_candidate(pos, key, cfg, quad_stats=None):
    pts = pos[list(key)]
    order = _clockwise_order(pts)
    opts = pts[order]
    if not geometric_filter(opts, cfg):
        return None
    if quad_stats is not None and not quad_stats(opts):
        return None
    idx = tuple(int(key[o]) for o in order)
    start = int(np.argmin(idx))
    idx = idx[start:] + idx[:start]
    opts = np.roll(opts, -start, axis=0)
    h = homography_from_4pts(opts, INNER_SQUARE)
    return CandidateQuad(corner_indices=idx, orientation=0, homography=h, points=opts)


def orientations(q: CandidateQuad) -> list[CandidateQuad]:
    """The four cyclic rotations of a quad, each rectified with its first corner top-left."""
    out = []
    for k in range(4):
        idx = q.corner_indices[k:] + q.corner_indices[:k]
        pts = np.roll(q.points, -k, axis=0)
        h = homography_from_4pts(pts, INNER_SQUARE)
        out.append(CandidateQuad(corner_indices=idx, orientation=k, homography=h, points=pts))
    return out


def dump_candidates(quads, fileobj) -> None:
    """Debug dump: one JSON line per candidate quad."""
    for q in quads:
        fileobj.write(
            json.dumps(
                {
                    "idx": list(q.corner_indices),
                    "orientation": q.orientation,
                    "H": [float(v) for v in q.homography.H.ravel()],
                }
            )
            + "\n"
        )
