"""Synthetic ground-truth generator.

Builds an articulated capsule-chain body whose surface carries a coded corner
layout, animates it with smooth per-joint rotation curves plus an optional
sinusoidal breathing field on the rest pose, surrounds it with a circular
camera rig, and computes per-camera corner/quad visibility. Every stage of the
real pipeline can be checked against the values generated here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, CameraRig, rot_to_quat
from .layout import CodeAlphabet, SuitLayout, concat_layouts, generate_synthetic_layout
from .meshes import segments_hit_triangles, triangulate_faces, vertex_normals
from .skinning import SkinnedBodyModel, joint_transforms, skin_with_transforms

DEFAULT_IMAGE_SIZE = (4000, 2160)
DEFAULT_FOCAL = 2400.0
MIN_PIXEL_SEPARATION = 4.0  # a detector cannot resolve corners closer than this

__all__ = [
    "SyntheticScene",
    "VisibilityRecord",
    "build_default_rig",
    "build_tube_body",
    "stick_figure_scene",
    "tube_scene",
    "animate_and_sample",
    "compute_visibility",
    "truth_clouds",
]


def build_default_rig(
    n_cameras: int = 16,
    radius: float = 3200.0,
    height: float = 1000.0,
    focal: float = DEFAULT_FOCAL,
    image_size=DEFAULT_IMAGE_SIZE,
    center=(0.0, 0.0, 1000.0),
) -> CameraRig:
    """Cameras evenly spaced on a circle, all aimed at the center of the volume."""
    if n_cameras < 2:
        raise ValueError("a rig needs at least two cameras")
    center = np.asarray(center, dtype=float)
    K = np.array(
        [[focal, 0.0, image_size[0] / 2.0], [0.0, focal, image_size[1] / 2.0], [0.0, 0.0, 1.0]]
    )
    cams = []
    for i in range(n_cameras):
        phi = 2.0 * np.pi * i / n_cameras
        pos = center + np.array([radius * np.cos(phi), radius * np.sin(phi), height - center[2]])
        z = center - pos
        z /= np.linalg.norm(z)
        x = np.cross(z, np.array([0.0, 0.0, 1.0]))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        cams.append(
            Camera(
                id=i,
                intrinsics=K,
                distortion=np.zeros(5),
                rotation=rot_to_quat(R),
                translation=-R @ pos,
                image_size=image_size,
            )
        )
    return CameraRig(cams)


@dataclass
class JointAnimation:
    """Smooth per-joint rotation curves: angle_j(k) = amp_j * sin(2*pi*k/period_j + phase_j)."""

    axes: np.ndarray        # (M, 3) unit
    amplitudes: np.ndarray  # (M,) radians
    periods: np.ndarray     # (M,) frames
    phases: np.ndarray      # (M,)
    root_sway: float = 0.0  # mm
    root_period: float = 240.0

    def pose(self, k: int):
        angles = self.amplitudes * np.sin(2.0 * np.pi * k / self.periods + self.phases)
        rotvecs = self.axes * angles[:, None]
        from .geometry import quat_from_rotvec

        quats = quat_from_rotvec(rotvecs)
        phi = 2.0 * np.pi * k / self.root_period
        root_t = self.root_sway * np.array([np.cos(phi), np.sin(phi), 0.0])
        return quats, root_t

    @classmethod
    def random(cls, n_joints: int, rng, strength: float = 1.0, root_sway: float = 60.0):
        axes = rng.normal(size=(n_joints, 3))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        amplitudes = np.radians(rng.uniform(8.0, 25.0, n_joints)) * strength
        periods = rng.uniform(60.0, 160.0, n_joints)
        phases = rng.uniform(0.0, 2.0 * np.pi, n_joints)
        # keep the root near identity so the rig always faces the body
        amplitudes[0] *= 0.3
        return cls(axes, amplitudes, periods, phases, root_sway=root_sway * strength)


@dataclass
class SyntheticScene:
    model: SkinnedBodyModel
    layout: SuitLayout
    rig: CameraRig
    animation: JointAnimation
    breathing_amplitude: np.ndarray  # (N,) mm
    breathing_dirs: np.ndarray       # (N, 3) unit
    breathing_period: float = 100.0
    seed: int = 0
    vertex_tube: np.ndarray = None   # (N,) tube index per vertex
    triangles: np.ndarray = field(init=False, repr=False)
    quad_codes: list = field(init=False, repr=False)
    quad_ids: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.triangles = triangulate_faces(self.layout.faces, self.model.rest_vertices)
        self.quad_codes = list(self.layout.codes)
        self.quad_ids = np.array([self.layout.quad_table[c] for c in self.quad_codes], dtype=int)
        if self.vertex_tube is None:
            self.vertex_tube = np.zeros(self.model.n_vertices, dtype=int)

    def rest_displacements(self, k: int):
        s = np.sin(2.0 * np.pi * k / self.breathing_period)
        return (self.breathing_amplitude * s)[:, None] * self.breathing_dirs

    def pose(self, k: int):
        return self.animation.pose(k)

    def positions(self, k: int):
        """Ground-truth corner positions: skin(rest + breathing) at frame k."""
        quats, root_t = self.pose(k)
        G = joint_transforms(self.model, quats, root_t)
        rest_k = self.model.rest_vertices + self.rest_displacements(k)
        return skin_with_transforms(self.model, G, rest_override=rest_k)

    def posed_model(self, n_frames: int) -> SkinnedBodyModel:
        """Copy of the generative model with the first n_frames poses baked in."""
        m = self.model.copy()
        quats = []
        roots = []
        for k in range(n_frames):
            q, r = self.pose(k)
            quats.append(q)
            roots.append(r)
        m.pose_quats = np.array(quats)
        m.root_translations = np.array(roots)
        m.validate()
        return m


def _orthonormal_frame(ez):
    ez = ez / np.linalg.norm(ez)
    a = np.array([1.0, 0.0, 0.0]) if abs(ez[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    ex = np.cross(a, ez)
    ex /= np.linalg.norm(ex)
    ey = np.cross(ez, ex)
    return ex, ey, ez


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def build_tube_body(joints, parents, bones, alphabet: CodeAlphabet | None = None):
    """Assemble a multi-tube body: layout, rest vertices, weights, tube index.

    Each bone entry is (parent_joint, child_joint, radius, strips, codes_per_strip);
    a cylindrical corner grid wraps each bone. Skinning weight rests on the
    bone's parent joint, blending smoothly into the child joint near the far
    end and into the grandparent joint near the near end.
    """
    joints = np.asarray(joints, dtype=float)
    parents = np.asarray(parents, dtype=int)
    alphabet = alphabet or CodeAlphabet()
    M = len(joints)

    parts = []
    rest = []
    weights = []
    tube_of = []
    code_offset = 0
    for tube_idx, (jp, jc, radius, strips, codes_per_strip) in enumerate(bones):
        part = generate_synthetic_layout(strips, codes_per_strip, alphabet, code_offset)
        code_offset += strips * codes_per_strip
        parts.append(part)
        cols = 2 * codes_per_strip
        rows = strips + 1
        p0, p1 = joints[jp], joints[jc]
        ex, ey, ez = _orthonormal_frame(p1 - p0)
        for r in range(rows):
            t = 0.1 + 0.8 * (r / max(strips, 1))
            centre = p0 + t * (p1 - p0)
            w_child = 0.5 * _smoothstep((t - 0.7) / 0.3)
            w_grand = 0.5 * _smoothstep((0.3 - t) / 0.3) if parents[jp] >= 0 else 0.0
            w_row = np.zeros(M)
            w_row[jc] = w_child
            if parents[jp] >= 0:
                w_row[parents[jp]] += w_grand
            w_row[jp] += 1.0 - w_row.sum()
            for c in range(cols):
                theta = 2.0 * np.pi * c / cols
                rest.append(centre + radius * (np.cos(theta) * ex + np.sin(theta) * ey))
                weights.append(w_row)
                tube_of.append(tube_idx)
    layout = concat_layouts(parts)
    rest = np.array(rest)
    if len(rest) != layout.n_corners:
        raise AssertionError("tube grids and layout disagree on corner count")
    model = SkinnedBodyModel(rest, joints, parents, np.array(weights))
    return layout, model, np.array(tube_of, dtype=int)


STICK_FIGURE_JOINTS = np.array(
    [
        [0, 0, 1000],      # 0 pelvis (root)
        [0, 0, 1150],      # 1 spine1
        [0, 0, 1300],      # 2 spine2
        [0, 0, 1450],      # 3 chest
        [130, 0, 1480],    # 4 l_shoulder
        [430, 0, 1480],    # 5 l_elbow
        [700, 0, 1480],    # 6 l_wrist
        [-130, 0, 1480],   # 7 r_shoulder
        [-430, 0, 1480],   # 8 r_elbow
        [-700, 0, 1480],   # 9 r_wrist
        [95, 0, 950],      # 10 l_hip
        [95, 0, 520],      # 11 l_knee
        [95, 0, 90],       # 12 l_ankle
        [-95, 0, 950],     # 13 r_hip
        [-95, 0, 520],     # 14 r_knee
        [-95, 0, 90],      # 15 r_ankle
    ],
    dtype=float,
)

STICK_FIGURE_PARENTS = np.array([-1, 0, 1, 2, 3, 4, 5, 3, 7, 8, 0, 10, 11, 0, 13, 14])

# (parent_joint, child_joint, radius mm, strips, codes_per_strip)
STICK_FIGURE_BONES = [
    (0, 1, 150.0, 3, 20),
    (1, 2, 150.0, 3, 20),
    (2, 3, 145.0, 3, 20),
    (3, 4, 70.0, 2, 9),
    (4, 5, 55.0, 3, 10),
    (5, 6, 45.0, 3, 9),
    (3, 7, 70.0, 2, 9),
    (7, 8, 55.0, 3, 10),
    (8, 9, 45.0, 3, 9),
    (0, 10, 85.0, 2, 8),
    (10, 11, 75.0, 4, 13),
    (11, 12, 55.0, 4, 12),
    (0, 13, 85.0, 2, 8),
    (13, 14, 75.0, 4, 13),
    (14, 15, 55.0, 4, 12),
]


def stick_figure_scene(
    n_cameras: int = 16,
    seed: int = 0,
    breathing_amplitude: float = 0.0,
    breathing_period: float = 100.0,
    animation_strength: float = 1.0,
    bones=None,
) -> SyntheticScene:
    """Full 16-joint capsule-chain body wrapped with roughly 1.5k coded corners."""
    rng = np.random.default_rng(seed)
    layout, model, tube_of = build_tube_body(
        STICK_FIGURE_JOINTS, STICK_FIGURE_PARENTS, bones or STICK_FIGURE_BONES
    )
    animation = JointAnimation.random(model.n_joints, rng, strength=animation_strength)
    amp, dirs = _breathing_field(model, layout, breathing_amplitude)
    return SyntheticScene(
        model=model,
        layout=layout,
        rig=build_default_rig(n_cameras),
        animation=animation,
        breathing_amplitude=amp,
        breathing_dirs=dirs,
        breathing_period=breathing_period,
        seed=seed,
        vertex_tube=tube_of,
    )


def tube_scene(
    n_cameras: int = 16,
    strips: int = 6,
    codes_per_strip: int = 10,
    radius: float = 150.0,
    seed: int = 0,
    breathing_amplitude: float = 0.0,
    breathing_period: float = 100.0,
    animation_strength: float = 1.0,
) -> SyntheticScene:
    """Single articulated cylinder: a 3-joint chain wrapped with one corner grid."""
    rng = np.random.default_rng(seed)
    joints = np.array([[0, 0, 600], [0, 0, 1000], [0, 0, 1400]], dtype=float)
    parents = np.array([-1, 0, 1])
    layout, model, tube_of = build_tube_body(
        joints, parents, [(0, 1, radius, strips, codes_per_strip // 2 or 1),
                          (1, 2, radius, strips, codes_per_strip // 2 or 1)]
    )
    animation = JointAnimation.random(model.n_joints, rng, strength=animation_strength, root_sway=30.0)
    amp, dirs = _breathing_field(model, layout, breathing_amplitude)
    return SyntheticScene(
        model=model,
        layout=layout,
        rig=build_default_rig(n_cameras),
        animation=animation,
        breathing_amplitude=amp,
        breathing_dirs=dirs,
        breathing_period=breathing_period,
        seed=seed,
        vertex_tube=tube_of,
    )


def _breathing_field(model: SkinnedBodyModel, layout: SuitLayout, amplitude: float):
    """Smooth radial displacement field; amplitude varies softly along the body height."""
    tris = triangulate_faces(layout.faces, model.rest_vertices)
    dirs = vertex_normals(model.rest_vertices, tris)
    z = model.rest_vertices[:, 2]
    span = np.ptp(z) or 1.0
    amp = amplitude * (0.6 + 0.4 * np.sin(2.0 * np.pi * (z - z.min()) / span))
    return amp, dirs


def animate_and_sample(scene: SyntheticScene, n_frames: int):
    """Ground-truth corner positions for frames 0..n_frames-1, shape (K, N, 3)."""
    return np.stack([scene.positions(k) for k in range(n_frames)])


@dataclass
class VisibilityRecord:
    frame_index: int
    visible_corners: dict   # cam_id -> int array of corner ids
    visible_quads: dict     # cam_id -> list[(code, (id1..id4))]


def compute_visibility(
    scene: SyntheticScene,
    frame_index: int,
    positions=None,
    min_separation: float = MIN_PIXEL_SEPARATION,
    occlusion: bool = True,
) -> VisibilityRecord:
    """Corner/quad visibility per camera at one frame.

    A corner is visible when it projects with positive depth inside the image,
    its outward normal faces the camera, no other candidate corner projects
    within `min_separation` px (detector resolution), and the camera-to-corner
    segment is not blocked. Occlusion rays are tested against the triangles of
    other tubes whose bounding boxes the segment crosses; each straight tube
    segment is treated as self-occluding only through its back-face test.
    """
    from scipy.spatial import cKDTree

    from .geometry import project_many
    from .meshes import pack_triangles

    pos = scene.positions(frame_index) if positions is None else positions
    normals = vertex_normals(pos, scene.triangles)
    n_tubes = int(scene.vertex_tube.max()) + 1
    tube_boxes = np.empty((n_tubes, 2, 3))
    tri_tube = scene.vertex_tube[scene.triangles[:, 0]]
    tube_packs = []
    for t in range(n_tubes):
        pts = pos[scene.vertex_tube == t]
        tube_boxes[t, 0] = pts.min(axis=0)
        tube_boxes[t, 1] = pts.max(axis=0)
        tube_packs.append(pack_triangles(pos[scene.triangles[tri_tube == t]]))

    cand_per_cam = {}
    for cam in scene.rig:
        uv, z = project_many(cam, pos)
        w, h = cam.image_size
        ok = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
        view = cam.center - pos
        ok &= np.einsum("ij,ij->i", normals, view) > 0
        ok[scene.layout.n_corners :] = False  # hole-closing vertices are never detected
        cand = np.where(ok)[0]
        if len(cand) > 1 and min_separation > 0:
            tree = cKDTree(uv[cand])
            close = tree.query_pairs(min_separation, output_type="ndarray")
            if len(close):
                keep = np.ones(len(cand), dtype=bool)
                keep[np.unique(close.ravel())] = False
                cand = cand[keep]
        cand_per_cam[cam.id] = cand

    if occlusion:
        origins = np.concatenate(
            [np.broadcast_to(scene.rig.camera(c).center, (len(ids), 3)) for c, ids in cand_per_cam.items()]
        )
        corner_ids = np.concatenate(list(cand_per_cam.values())).astype(int)
        clear = _unoccluded(scene, origins, pos[corner_ids], scene.vertex_tube[corner_ids], tube_boxes, tube_packs)
        off = 0
        for c, ids in cand_per_cam.items():
            cand_per_cam[c] = ids[clear[off : off + len(ids)]]
            off += len(ids)

    visible_corners = {}
    visible_quads = {}
    for cam_id, cand in cand_per_cam.items():
        vis_mask = np.zeros(scene.model.n_vertices, dtype=bool)
        vis_mask[cand] = True
        visible_corners[cam_id] = cand
        qmask = vis_mask[scene.quad_ids].all(axis=1)
        visible_quads[cam_id] = [
            (scene.quad_codes[q], tuple(int(v) for v in scene.quad_ids[q]))
            for q in np.where(qmask)[0]
        ]
    return VisibilityRecord(frame_index, visible_corners, visible_quads)


def _unoccluded(scene, origins, targets, own_tube, tube_boxes, tube_packs):
    """Flat occlusion pass: segment s runs origin->target, skipping its own tube."""
    d = targets - origins

    # segment vs tube AABB, slab test vectorized over (segments, tubes)
    lo = tube_boxes[None, :, 0, :]
    hi = tube_boxes[None, :, 1, :]
    o = origins[:, None, :]
    dd = d[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(np.abs(dd) > 1e-12, 1.0 / dd, np.inf)
    t1 = (lo - o) * inv
    t2 = (hi - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # degenerate axes: inside-slab check
    flat = np.abs(dd) <= 1e-12
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(flat, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(flat, np.where(inside, np.inf, -np.inf), tmax)
    enter = tmin.max(axis=2)
    exit_ = tmax.min(axis=2)
    crosses = (enter <= exit_) & (exit_ > 0) & (enter < 1.0)
    crosses[np.arange(len(origins)), own_tube] = False

    clear = np.ones(len(origins), dtype=bool)
    for t in range(tube_boxes.shape[0]):
        seg_rows = np.where(crosses[:, t])[0]
        if not len(seg_rows):
            continue
        hit = segments_hit_triangles(origins[seg_rows], targets[seg_rows], pack=tube_packs[t])
        clear[seg_rows] &= ~hit
    return clear


def truth_clouds(scene: SyntheticScene, n_frames: int, min_cameras: int = 2):
    """Per-frame ground-truth clouds of corners visible in at least `min_cameras`."""
    from .reconstruct import LabeledPointCloud, PointRecord

    clouds = []
    for k in range(n_frames):
        pos = scene.positions(k)
        vis = compute_visibility(scene, k, positions=pos)
        counts = np.zeros(scene.model.n_vertices, dtype=int)
        cam_sets: dict[int, list] = {}
        for cam_id, ids in vis.visible_corners.items():
            counts[ids] += 1
            for cid in ids:
                cam_sets.setdefault(int(cid), []).append(cam_id)
        cloud = LabeledPointCloud(k)
        for cid in np.where(counts >= min_cameras)[0]:
            cloud.points[int(cid)] = PointRecord(
                position=pos[cid].copy(),
                cameras=tuple(sorted(cam_sets[int(cid)])),
                mean_reproj_err=0.0,
            )
        clouds.append(cloud)
    return clouds


# ---------------------------------------------------------------------------
# scene spec files


def save_scene_spec(spec: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(spec, f, indent=2)
        f.write("\n")


def scene_from_spec(spec: dict) -> SyntheticScene:
    """Build a scene from a JSON-able spec dict (preset plus parameters)."""
    preset = spec.get("preset", "stick_figure")
    common = dict(
        n_cameras=spec.get("n_cameras", 16),
        seed=spec.get("seed", 0),
        breathing_amplitude=spec.get("breathing_amplitude", 0.0),
        breathing_period=spec.get("breathing_period", 100.0),
        animation_strength=spec.get("animation_strength", 1.0),
    )
    if preset == "stick_figure":
        return stick_figure_scene(**common)
    if preset == "tube":
        return tube_scene(
            strips=spec.get("strips", 6),
            codes_per_strip=spec.get("codes_per_strip", 10),
            radius=spec.get("radius", 150.0),
            **common,
        )
    raise ValueError(f"unknown scene preset {preset!r}")
