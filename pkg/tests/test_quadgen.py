import itertools
import math

import numpy as np

from suitcap.geometry import warp_point
from suitcap.quadgen import (
    INNER_SQUARE,
    Corner2D,
    QuadFilterConfig,
    enumerate_candidates,
    geometric_filter,
    is_convex_clockwise,
    orientations,
    signed_area,
)

PERMISSIVE = QuadFilterConfig(
    bbox_radius=500.0,
    min_area=10.0,
    max_area=1e6,
    min_edge=1.0,
    max_edge=1000.0,
    min_angle=5.0,
    max_angle=175.0,
)


def corners_at(pts):
    return [Corner2D(p) for p in pts]


def test_square_yields_exactly_one_quad():
    pts = [(100.0, 100.0), (130.0, 100.0), (130.0, 130.0), (100.0, 130.0)]
    quads = enumerate_candidates(corners_at(pts), PERMISSIVE)
    assert len(quads) == 1
    assert sorted(quads[0].corner_indices) == [0, 1, 2, 3]


def test_collinear_corners_yield_nothing():
    pts = [(0.0, 0.0), (10.0, 0.0), (20.0, 0.0), (30.0, 0.0)]
    assert enumerate_candidates(corners_at(pts), PERMISSIVE) == []


def test_signed_area_negative_for_clockwise_in_image_coords():
    cw = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]  # y grows downward
    assert signed_area(cw) < 0
    assert signed_area(cw[::-1]) > 0
    assert is_convex_clockwise(cw)
    assert not is_convex_clockwise(cw[::-1])


def test_geometric_filter_bounds():
    sq = np.array([(0.0, 0.0), (40.0, 0.0), (40.0, 40.0), (0.0, 40.0)])
    cfg = QuadFilterConfig(min_area=100.0, max_area=10000.0)
    assert geometric_filter(sq, cfg)
    tight = QuadFilterConfig(min_area=100.0, max_area=10000.0, max_edge=10.0)
    assert not geometric_filter(sq, tight)


def _oracle_filter(pts, cfg):
    """Independent predicate: hull-based convexity, shoelace area, atan2 angles."""
    pts = np.asarray(pts, dtype=float)
    area2 = 0.0
    for i in range(4):
        x1, y1 = pts[i]
        x2, y2 = pts[(i + 1) % 4]
        area2 += x1 * y2 - x2 * y1
    # positive 'standard' shoelace in y-down coords means visually clockwise
    if area2 <= 0:
        return False
    signs = []
    for i in range(4):
        a, b, c = pts[i], pts[(i + 1) % 4], pts[(i + 2) % 4]
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if cross == 0:
            return False
        signs.append(cross > 0)
    if len(set(signs)) != 1:
        return False
    area = abs(area2) / 2.0
    if not cfg.min_area <= area <= cfg.max_area:
        return False
    for i in range(4):
        e = math.dist(pts[i], pts[(i + 1) % 4])
        if not cfg.min_edge <= e <= cfg.max_edge:
            return False
    for i in range(4):
        p, q, r = pts[(i - 1) % 4], pts[i], pts[(i + 1) % 4]
        v1 = (p[0] - q[0], p[1] - q[1])
        v2 = (r[0] - q[0], r[1] - q[1])
        ang = abs(
            math.degrees(
                math.atan2(v1[0] * v2[1] - v1[1] * v2[0], v1[0] * v2[0] + v1[1] * v2[1])
            )
        )
        if not cfg.min_angle <= ang <= cfg.max_angle:
            return False
    return True


def test_filter_matches_independent_predicate(rng):
    cfg = QuadFilterConfig(
        bbox_radius=300.0,
        min_area=120.0,
        max_area=5e4,
        min_edge=4.0,
        max_edge=400.0,
        min_angle=20.0,
        max_angle=160.0,
    )
    agree = 0
    for _ in range(10000):
        pts = rng.uniform(0, 200, (4, 2))
        assert geometric_filter(pts, cfg) == _oracle_filter(pts, cfg)
        agree += 1
    assert agree == 10000


def test_enumeration_matches_bruteforce(rng):
    pts = rng.uniform(0, 260, (28, 2))
    cfg = QuadFilterConfig(
        bbox_radius=150.0,
        min_area=50.0,
        max_area=3e4,
        min_edge=3.0,
        max_edge=200.0,
        min_angle=15.0,
        max_angle=165.0,
    )
    got = {tuple(sorted(q.corner_indices)) for q in enumerate_candidates(corners_at(pts), cfg)}

    expected = set()
    for combo in itertools.combinations(range(len(pts)), 4):
        quad = pts[list(combo)]
        # bounding-box reachability: some corner must see the other three in its box
        reachable = any(
            all(np.abs(quad[j] - quad[i]).max() <= cfg.bbox_radius for j in range(4))
            for i in range(4)
        )
        if not reachable:
            continue
        c = quad.mean(axis=0)
        order = np.argsort(np.arctan2(quad[:, 1] - c[1], quad[:, 0] - c[0]))
        if geometric_filter(quad[order], cfg):
            expected.add(tuple(sorted(combo)))
    assert got == expected


def test_enumeration_contains_ground_truth_quads():
    # a regular grid of corners: every unit cell is a ground-truth quad
    xs, ys = np.meshgrid(np.arange(5) * 30.0, np.arange(4) * 30.0)
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    cfg = QuadFilterConfig(
        bbox_radius=45.0,
        min_area=400.0,
        max_area=2000.0,
        min_edge=10.0,
        max_edge=60.0,
        min_angle=30.0,
        max_angle=150.0,
    )
    got = {tuple(sorted(q.corner_indices)) for q in enumerate_candidates(corners_at(pts), cfg)}
    for r in range(3):
        for c in range(4):
            cell = (r * 5 + c, r * 5 + c + 1, (r + 1) * 5 + c, (r + 1) * 5 + c + 1)
            assert tuple(sorted(cell)) in got


def test_enumeration_is_order_independent(rng):
    pts = rng.uniform(0, 200, (20, 2))
    corners = corners_at(pts)
    base = {tuple(sorted(q.corner_indices)) for q in enumerate_candidates(corners, PERMISSIVE)}
    perm = rng.permutation(len(pts))
    shuffled = [corners[i] for i in perm]
    got = set()
    for q in enumerate_candidates(shuffled, PERMISSIVE):
        got.add(tuple(sorted(int(perm[i]) for i in q.corner_indices)))
    assert got == base


def test_no_repeated_indices(rng):
    pts = rng.uniform(0, 150, (18, 2))
    for q in enumerate_candidates(corners_at(pts), PERMISSIVE):
        assert len(set(q.corner_indices)) == 4


def test_quad_stats_callback_can_veto(rng):
    pts = rng.uniform(0, 150, (14, 2))
    corners = corners_at(pts)
    base = enumerate_candidates(corners, PERMISSIVE)
    assert base
    none = enumerate_candidates(corners, PERMISSIVE, quad_stats=lambda q: False)
    assert none == []
    # vetoing by centroid keeps exactly the complement
    keep = enumerate_candidates(corners, PERMISSIVE, quad_stats=lambda q: q[:, 0].mean() > 75.0)
    assert {q.corner_indices for q in keep} == {
        q.corner_indices for q in base if q.points[:, 0].mean() > 75.0
    }


def test_orientations_cycle_and_standard_square():
    pts = [(100.0, 100.0), (164.0, 100.0), (164.0, 164.0), (100.0, 164.0)]
    quads = enumerate_candidates(corners_at(pts), PERMISSIVE)
    assert len(quads) == 1
    os4 = orientations(quads[0])
    assert [o.orientation for o in os4] == [0, 1, 2, 3]
    # cyclic rotations of the index tuple
    for k, o in enumerate(os4):
        assert o.corner_indices == quads[0].corner_indices[k:] + quads[0].corner_indices[:k]
    # each orientation maps its first corner to the inner square's top-left
    for o in os4:
        first = o.points[0]
        assert np.abs(warp_point(o.homography, first) - INNER_SQUARE[0]).max() < 1e-9
        for corner, target in zip(o.points, INNER_SQUARE):
            assert np.abs(warp_point(o.homography, corner) - target).max() < 1e-9


def test_orientation_homographies_differ_by_square_rotation(rng):
    pts = np.array([(100.0, 100.0), (160.0, 96.0), (170.0, 160.0), (96.0, 152.0)])
    quads = enumerate_candidates(corners_at(pts), PERMISSIVE)
    os4 = orientations(quads[0])
    # S maps the standardized square onto itself, sending the old top-right
    # to the new top-left: a -90 degree turn about the square center
    c = np.array([52.0, 52.0])
    R = np.array([[0.0, 1.0], [-1.0, 0.0]])
    S = np.eye(3)
    S[:2, :2] = R
    S[:2, 2] = c - R @ c
    for k in range(4):
        Hk = os4[k].homography.H
        Hn = os4[(k + 1) % 4].homography.H
        prod = S @ Hk
        prod /= prod[2, 2]
        assert np.abs(prod - Hn).max() < 1e-8
