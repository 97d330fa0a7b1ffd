"""Linear blend skinning body model.

A model holds rest-pose vertices, a joint tree, row-stochastic skinning
weights, and per-frame poses (one unit quaternion per joint plus a root
translation). Joint rotations act about the rest-pose joint positions and
compose along the kinematic chain, so the identity pose reproduces the rest
pose exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import SingularBlend
from .geometry import quat_normalize, quat_to_rot

__all__ = [
    "SkinnedBodyModel",
    "joint_transforms",
    "blend_transforms",
    "skin",
    "skin_all",
    "unskin",
    "unskin_points",
    "save_model",
    "load_model",
    "export_obj",
]


@dataclass
class SkinnedBodyModel:
    rest_vertices: np.ndarray     # (N, 3) mm
    joints: np.ndarray            # (M, 3) mm
    parents: np.ndarray           # (M,) int, root = -1
    weights: np.ndarray           # (N, M), rows on the simplex
    pose_quats: np.ndarray = None        # (K, M, 4)
    root_translations: np.ndarray = None  # (K, 3)
    never_observed: np.ndarray = None    # (N,) bool, hole-closing vertices
    topo_order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.rest_vertices = np.asarray(self.rest_vertices, dtype=float).reshape(-1, 3)
        self.joints = np.asarray(self.joints, dtype=float).reshape(-1, 3)
        self.parents = np.asarray(self.parents, dtype=int).reshape(-1)
        self.weights = np.asarray(self.weights, dtype=float).reshape(len(self.rest_vertices), -1)
        if self.pose_quats is None:
            self.pose_quats = np.zeros((0, self.n_joints, 4))
        if self.root_translations is None:
            self.root_translations = np.zeros((0, 3))
        self.pose_quats = np.asarray(self.pose_quats, dtype=float).reshape(-1, self.n_joints, 4)
        self.root_translations = np.asarray(self.root_translations, dtype=float).reshape(-1, 3)
        if self.never_observed is None:
            self.never_observed = np.zeros(len(self.rest_vertices), dtype=bool)
        self.never_observed = np.asarray(self.never_observed, dtype=bool)
        self.topo_order = _topological_order(self.parents)
        self.validate()

    @property
    def n_vertices(self) -> int:
        return len(self.rest_vertices)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def n_frames(self) -> int:
        return len(self.pose_quats)

    def validate(self):
        rows = self.weights.sum(axis=1)
        if np.any(np.abs(rows - 1.0) > 1e-9):
            raise ValueError("weight rows must sum to 1")
        if np.any(self.weights < -1e-12):
            raise ValueError("weights must be nonnegative")
        if self.n_frames:
            norms = np.linalg.norm(self.pose_quats, axis=-1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise ValueError("pose quaternions must be unit norm")
        if len(self.root_translations) != self.n_frames:
            raise ValueError("one root translation per pose frame required")

    def identity_pose(self):
        q = np.zeros((self.n_joints, 4))
        q[:, 0] = 1.0
        return q, np.zeros(3)

    def copy(self) -> "SkinnedBodyModel":
        return SkinnedBodyModel(
            self.rest_vertices.copy(),
            self.joints.copy(),
            self.parents.copy(),
            self.weights.copy(),
            self.pose_quats.copy(),
            self.root_translations.copy(),
            self.never_observed.copy(),
        )


def _topological_order(parents):
    n = len(parents)
    order = []
    placed = np.zeros(n, dtype=bool)
    remaining = set(range(n))
    guard = 0
    while remaining:
        progressed = False
        for j in sorted(remaining):
            p = parents[j]
            if p == -1 or placed[p]:
                order.append(j)
                placed[j] = True
                remaining.discard(j)
                progressed = True
        guard += 1
        if not progressed or guard > n + 1:
            raise ValueError("joint parents must form an acyclic tree")
    return np.array(order, dtype=int)


def joint_transforms(model: SkinnedBodyModel, quats, root_translation):
    """World 4x4 transform per joint for one pose.

    Each joint rotates about its rest position; the root additionally carries
    the frame's global translation. Transforms compose parent-to-child, so the
    identity pose yields identity transforms (plus the root translation).
    """
    quats = np.asarray(quats, dtype=float).reshape(model.n_joints, 4)
    R = quat_to_rot(quats)
    G = np.zeros((model.n_joints, 4, 4))
    for j in model.topo_order:
        c = model.joints[j]
        A = np.eye(4)
        A[:3, :3] = R[j]
        A[:3, 3] = c - R[j] @ c
        p = model.parents[j]
        if p == -1:
            A[:3, 3] += np.asarray(root_translation, dtype=float)
            G[j] = A
        else:
            G[j] = G[p] @ A
    return G


def blend_transforms(model: SkinnedBodyModel, G, vertex_ids=None):
    """Per-vertex blended affine transform: (linear (n,3,3), translation (n,3))."""
    W = model.weights if vertex_ids is None else model.weights[vertex_ids]
    A = np.einsum("nm,mij->nij", W, G[:, :3, :])
    return A[:, :, :3], A[:, :, 3]


def skin_all(model: SkinnedBodyModel, frame: int, rest_override=None):
    """Deformed positions of all vertices at a stored pose frame."""
    G = joint_transforms(model, model.pose_quats[frame], model.root_translations[frame])
    return skin_with_transforms(model, G, rest_override=rest_override)


def skin_with_transforms(model: SkinnedBodyModel, G, vertex_ids=None, rest_override=None):
    lin, tr = blend_transforms(model, G, vertex_ids)
    rest = model.rest_vertices if rest_override is None else rest_override
    if vertex_ids is not None and rest_override is None:
        rest = rest[vertex_ids]
    return np.einsum("nij,nj->ni", lin, rest) + tr


def skin(model: SkinnedBodyModel, frame: int, vertex: int):
    """Deformed position of one vertex at a stored pose frame."""
    return skin_all(model, frame)[vertex]


def unskin_points(model: SkinnedBodyModel, frame: int, vertex_ids, points):
    """Map observed world points back to rest space through the blended inverses.

    Raises
    ------
    SingularBlend
        If any vertex's blended matrix has |det| <= 1e-9.
    """
    G = joint_transforms(model, model.pose_quats[frame], model.root_translations[frame])
    return unskin_with_transforms(model, G, vertex_ids, points)


def unskin_with_transforms(model: SkinnedBodyModel, G, vertex_ids, points):
    vertex_ids = np.asarray(vertex_ids, dtype=int)
    pts = np.asarray(points, dtype=float).reshape(len(vertex_ids), 3)
    lin, tr = blend_transforms(model, G, vertex_ids)
    det = np.linalg.det(lin)
    if np.any(np.abs(det) <= 1e-9):
        bad = vertex_ids[np.abs(det) <= 1e-9]
        raise SingularBlend(f"blended transform singular for vertices {bad.tolist()}")
    return np.linalg.solve(lin, (pts - tr)[..., None])[..., 0]


def unskin(model: SkinnedBodyModel, frame: int, vertex: int, point):
    return unskin_points(model, frame, [vertex], np.asarray(point, dtype=float).reshape(1, 3))[0]


# ---------------------------------------------------------------------------
# model files


def save_model(model: SkinnedBodyModel, path) -> None:
    """Write the model as JSON with sparse weight triplets and flat per-frame poses."""
    ii, jj = np.nonzero(model.weights)
    poses = []
    for k in range(model.n_frames):
        flat = [float(v) for v in model.pose_quats[k].ravel()]
        flat.extend(float(v) for v in model.root_translations[k])
        poses.append(flat)
    doc = {
        "rest": [[float(v) for v in row] for row in model.rest_vertices],
        "joints": [[float(v) for v in row] for row in model.joints],
        "parents": [int(p) for p in model.parents],
        "weights": [[int(i), int(j), float(model.weights[i, j])] for i, j in zip(ii, jj)],
        "poses": poses,
        "never_observed": [int(i) for i in np.where(model.never_observed)[0]],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)
        f.write("\n")


def load_model(path) -> SkinnedBodyModel:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    rest = np.array(doc["rest"], dtype=float)
    joints = np.array(doc["joints"], dtype=float)
    parents = np.array(doc["parents"], dtype=int)
    W = np.zeros((len(rest), len(joints)))
    for i, j, w in doc["weights"]:
        W[int(i), int(j)] = w
    n_joints = len(joints)
    quats = []
    roots = []
    for flat in doc["poses"]:
        arr = np.asarray(flat, dtype=float)
        quats.append(arr[: n_joints * 4].reshape(n_joints, 4))
        roots.append(arr[n_joints * 4 :])
    never = np.zeros(len(rest), dtype=bool)
    never[np.array(doc.get("never_observed", []), dtype=int)] = True
    return SkinnedBodyModel(
        rest,
        joints,
        parents,
        W,
        np.array(quats).reshape(-1, n_joints, 4),
        np.array(roots).reshape(-1, 3),
        never,
    )


def export_obj(vertices, faces, path) -> None:
    """Write a quad/triangle mesh as Wavefront OBJ (1-indexed)."""
    with open(path, "w", encoding="utf-8") as f:
        for v in vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for face in faces:
            f.write("f " + " ".join(str(int(i) + 1) for i in face) + "\n")


def renormalize_quats(quats):
    return quat_normalize(quats)
