"""Alternating refinement of the skinned body model.

Minimizes

    L(rest, joints, W, poses) = L_fit + lambda_g * sum_ij g_ij w_ij^2
                                + lambda_j * ||J - J0||_F^2

where L_fit is the observation-count-normalized sum of squared distances
between skinned vertices and reconstructed corners, and g_ij is the geodesic
distance from vertex i to the nearest vertex with initial support for joint j.
Each outer iteration solves four blocks in turn: per-frame poses (damped
Gauss-Newton on quaternion tangents + root translation), per-vertex weights
(simplex-constrained QP), joint positions (damped Gauss-Newton with the prior),
and per-vertex rest positions (linear least squares). Every block either
decreases the total loss or leaves its variables unchanged, so the loss trace
is non-increasing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import quat_from_rotvec, quat_mul, quat_normalize, quat_to_rot
from .layout import SuitLayout
from .meshes import edge_graph, geodesic_to_sources
from .skinning import SkinnedBodyModel, joint_transforms

__all__ = [
    "RefineConfig",
    "RefineResult",
    "refine",
    "geodesic_weights",
    "fit_poses",
    "fitting_rms",
    "simplex_qp",
    "pose_residual_jacobian",
]


@dataclass
class RefineConfig:
    lambda_g: float = 1000.0
    lambda_j: float = 1.0
    outer_iterations: int = 100
    convergence_tol: float = 1e-5
    prune_top: int = 4
    pose_iterations: int = 12
    joint_iterations: int = 6

    def __post_init__(self):
        if min(self.lambda_g, self.lambda_j, self.outer_iterations, self.convergence_tol) <= 0:
            raise ValueError("refine parameters must be positive")


@dataclass
class RefineResult:
    model: SkinnedBodyModel
    loss_trace: list
    fit_rms_trace: list
    unobserved_vertices: np.ndarray


# ---------------------------------------------------------------------------
# geodesic regularizer weights


def geodesic_weights(layout: SuitLayout, rest_vertices, initial_weights, threshold: float = 1e-6):
    """g[i, j]: mesh geodesic from vertex i to the nearest vertex with initial
    weight above `threshold` for joint j; +inf where joint j is unreachable."""
    rest_vertices = np.asarray(rest_vertices, dtype=float)
    W0 = np.asarray(initial_weights, dtype=float)
    graph = edge_graph(rest_vertices, layout.edges(), n_vertices=len(rest_vertices))
    g = np.empty_like(W0)
    for j in range(W0.shape[1]):
        sources = np.where(W0[:, j] > threshold)[0]
        g[:, j] = geodesic_to_sources(graph, sources)
    return g


# ---------------------------------------------------------------------------
# simplex-constrained per-vertex weight solve


def simplex_qp(Q, c, forced_zero=None, max_iterations: int = 400):
    """Minimize 1/2 w'Qw - c'w over the probability simplex (active-set method).

    `forced_zero` marks coordinates pinned to zero (unreachable joints). Q must
    be symmetric positive definite on the allowed coordinates; a relative ridge
    is added for safety.
    """
    Q = np.asarray(Q, dtype=float)
    c = np.asarray(c, dtype=float)
    M = len(c)
    allowed = np.ones(M, dtype=bool) if forced_zero is None else ~np.asarray(forced_zero, bool)
    if not allowed.any():
        raise ValueError("all coordinates forced to zero")
    Q = Q + (1e-12 * max(np.trace(Q) / M, 1e-30)) * np.eye(M)

    w = np.zeros(M)
    w[allowed] = 1.0 / allowed.sum()
    free = w > 0

    for _ in range(max_iterations):
        idx = np.where(free)[0]
        k = len(idx)
        KKT = np.empty((k + 1, k + 1))
        KKT[:k, :k] = Q[np.ix_(idx, idx)]
        KKT[:k, k] = 1.0
        KKT[k, :k] = 1.0
        KKT[k, k] = 0.0
        rhs = np.concatenate([c[idx], [1.0]])
        try:
            sol = np.linalg.solve(KKT, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(KKT, rhs, rcond=None)[0]
        w_new = np.zeros(M)
        w_new[idx] = sol[:k]
        nu = sol[k]

        if np.all(w_new[idx] >= -1e-12):
            w = np.clip(w_new, 0.0, None)
            s = w.sum()
            if s > 0:
                w /= s
            grad = Q @ w - c
            lam = grad - nu
            candidates = allowed & ~free
            if not candidates.any():
                return w
            j = np.where(candidates)[0][np.argmin(lam[candidates])]
            if lam[j] >= -1e-9 * (1.0 + np.abs(grad).max()):
                return w
            free[j] = True
        else:
            d = w_new - w
            blocking = idx[(w_new[idx] < -1e-12) & (d[idx] < 0)]
            alphas = w[blocking] / (w[blocking] - w_new[blocking])
            step = float(np.min(alphas))
            j = blocking[int(np.argmin(alphas))]
            w = w + step * d
            w[j] = 0.0
            w = np.clip(w, 0.0, None)
            free[j] = False
            if not free.any():
                free[np.where(allowed)[0][0]] = True
    return w


# ---------------------------------------------------------------------------
# pose block


def _subtree_matrix(parents):
    """sub[j, m] = 1 when joint j is in the subtree rooted at m (j == m included)."""
    M = len(parents)
    sub = np.zeros((M, M))
    for j in range(M):
        a = j
        while a != -1:
            sub[j, a] = 1.0
            a = parents[a]
    return sub


def _chain_context(model, quats, root_t):
    """Per-joint world transforms plus parent-chain rotations and joint centers."""
    G = joint_transforms(model, quats, root_t)
    R_local = quat_to_rot(np.asarray(quats, dtype=float))
    Rp = np.empty((model.n_joints, 3, 3))
    for j in range(model.n_joints):
        p = model.parents[j]
        Rp[j] = np.eye(3) if p == -1 else G[p, :3, :3]
    centers = np.einsum("mij,mj->mi", G[:, :3, :3], model.joints) + G[:, :3, 3]
    return G, R_local, Rp, centers


def pose_residual_jacobian(model: SkinnedBodyModel, quats, root_t, vertex_ids, targets):
    """Residuals v_i - p_i and their Jacobian w.r.t. (per-joint tangent, root translation).

    The tangent of joint m perturbs its local rotation on the left
    (R_m <- Exp(d) R_m); the world-space effect on a blended vertex is
    sum_{j in subtree(m)} w_ij (Rp_m d) x (G_j v_i - c_m), giving the closed
    form used here.
    """
    vertex_ids = np.asarray(vertex_ids, dtype=int)
    targets = np.asarray(targets, dtype=float).reshape(len(vertex_ids), 3)
    M = model.n_joints
    G, _, Rp, centers = _chain_context(model, quats, root_t)
    sub = _subtree_matrix(model.parents)

    W = model.weights[vertex_ids]  # (n, M)
    rest = model.rest_vertices[vertex_ids]
    y = np.einsum("mij,nj->nmi", G[:, :3, :3], rest) + G[:, :3, 3][None, :, :]  # (n, M, 3)
    v = np.einsum("nm,nmi->ni", W, y)
    r = v - targets

    wy = W[:, :, None] * y                      # (n, M, 3)
    s = np.einsum("njc,jm->nmc", wy, sub)       # sum over subtree(m) of w_ij y_ij
    Wsub = W @ sub                              # (n, M)
    arm = s - Wsub[:, :, None] * centers[None, :, :]

    n = len(vertex_ids)
    Jac = np.zeros((n, 3, 3 * M + 3))
    ax = arm[..., 0]
    ay = arm[..., 1]
    az = arm[..., 2]
    skew = np.zeros((n, M, 3, 3))
    skew[:, :, 0, 1] = -az
    skew[:, :, 0, 2] = ay
    skew[:, :, 1, 0] = az
    skew[:, :, 1, 2] = -ax
    skew[:, :, 2, 0] = -ay
    skew[:, :, 2, 1] = ax
    blocks = -np.einsum("nmij,mjk->nmik", skew, Rp)
    Jac[:, :, : 3 * M] = blocks.transpose(0, 2, 1, 3).reshape(n, 3, 3 * M)
    Jac[:, 0, 3 * M + 0] = 1.0
    Jac[:, 1, 3 * M + 1] = 1.0
    Jac[:, 2, 3 * M + 2] = 1.0
    return r, Jac


def _fit_pose_frame(model, quats, root_t, vertex_ids, targets, iterations):
    """Damped Gauss-Newton pose fit for one frame; only accepts decreasing steps."""
    M = model.n_joints
    quats = quat_normalize(np.asarray(quats, dtype=float).copy())
    root_t = np.asarray(root_t, dtype=float).copy()

    def sse(q, t):
        G = joint_transforms(model, q, t)
        y = np.einsum("mij,nj->nmi", G[:, :3, :3], model.rest_vertices[vertex_ids])
        y += G[:, :3, 3][None, :, :]
        v = np.einsum("nm,nmi->ni", model.weights[vertex_ids], y)
        d = v - targets
        return float(np.sum(d * d))

    cost = sse(quats, root_t)
    lam = 1e-4
    for _ in range(iterations):
        r, J = pose_residual_jacobian(model, quats, root_t, vertex_ids, targets)
        Jf = J.reshape(-1, 3 * M + 3)
        rf = r.reshape(-1)
        g = Jf.T @ rf
        if np.linalg.norm(g) < 1e-12 * (1.0 + cost):
            break
        H = Jf.T @ Jf
        stepped = False
        for _ in range(8):
            Hd = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                delta = np.linalg.solve(Hd, -g)
            except np.linalg.LinAlgError:
                delta = np.linalg.lstsq(Hd, -g, rcond=None)[0]
            dq = quat_from_rotvec(delta[: 3 * M].reshape(M, 3))
            q_new = quat_normalize(quat_mul(dq, quats))
            t_new = root_t + delta[3 * M :]
            c_new = sse(q_new, t_new)
            if c_new <= cost:
                decrease = cost - c_new
                quats, root_t, cost = q_new, t_new, c_new
                lam = max(lam / 3.0, 1e-12)
                stepped = True
                if decrease <= 1e-12 * (cost + 1e-30):
                    stepped = False  # converged to float floor
                break
            lam *= 4.0
        if not stepped:
            break
    return quats, root_t, cost


# ---------------------------------------------------------------------------
# joint block


def _fit_joints(model, frames_obs, lambda_j, joints0, total_obs, iterations):
    """Damped Gauss-Newton on joint positions with the l2 prior to J0.

    d v_i / d j_m = (sum_{j in subtree(m)} w_ij) * Rp_m (I - R_m) per frame, so
    the normal equations assemble from subtree weight sums and per-joint 3x3
    blocks.
    """
    M = model.n_joints
    sub = _subtree_matrix(model.parents)
    joints = model.joints.copy()
    lam = 1e-4

    def total_fit(j_pos):
        saved = model.joints
        model.joints = j_pos
        sse = 0.0
        for k, (ids, pts, q, t) in enumerate(frames_obs):
            G = joint_transforms(model, q, t)
            y = np.einsum("mij,nj->nmi", G[:, :3, :3], model.rest_vertices[ids]) + G[:, :3, 3]
            v = np.einsum("nm,nmi->ni", model.weights[ids], y)
            sse += float(np.sum((v - pts) ** 2))
        model.joints = saved
        return sse

    def loss_of(j_pos):
        return total_fit(j_pos) / total_obs + lambda_j * float(np.sum((j_pos - joints0) ** 2))

    cost = loss_of(joints)
    for _ in range(iterations):
        H = np.zeros((3 * M, 3 * M))
        g = np.zeros(3 * M)
        saved = model.joints
        model.joints = joints
        for ids, pts, q, t in frames_obs:
            G, R_local, Rp, _ = _chain_context(model, q, t)
            D = np.einsum("mij,mjk->mik", Rp, np.eye(3)[None] - R_local)  # (M, 3, 3)
            W = model.weights[ids]
            Wsub = W @ sub  # (n, M)
            y = np.einsum("mij,nj->nmi", G[:, :3, :3], model.rest_vertices[ids]) + G[:, :3, 3]
            v = np.einsum("nm,nmi->ni", W, y)
            r = v - pts
            S = Wsub.T @ Wsub  # (M, M) sum over obs of Wsub_im Wsub_im'
            DtD = np.einsum("mik,lij->mlkj", D, D)  # D_m' D_l as (M, M, 3, 3)
            H += (S[:, :, None, None] * DtD).transpose(0, 2, 1, 3).reshape(3 * M, 3 * M)
            rw = Wsub.T @ r  # (M, 3)
            g += np.einsum("mik,mi->mk", D, rw).reshape(3 * M)
        model.joints = saved
        H = 2.0 * H / total_obs + 2.0 * lambda_j * np.eye(3 * M)
        g = 2.0 * g / total_obs + 2.0 * lambda_j * (joints - joints0).reshape(3 * M)
        if np.linalg.norm(g) < 1e-12 * (1.0 + cost):
            break
        stepped = False
        for _ in range(8):
            Hd = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            delta = np.linalg.solve(Hd, -g)
            j_new = joints + delta.reshape(M, 3)
            c_new = loss_of(j_new)
            if c_new <= cost:
                joints, cost = j_new, c_new
                lam = max(lam / 3.0, 1e-12)
                stepped = True
                break
            lam *= 4.0
        if not stepped:
            break
    return joints


# ---------------------------------------------------------------------------
# loss bookkeeping


def _prepare_frames(model, clouds):
    frames_obs = []
    for k, cloud in enumerate(clouds):
        ids = np.array(sorted(cloud.points), dtype=int)
        ids = ids[ids < model.n_vertices]
        pts = np.array([cloud.points[int(i)].position for i in ids], dtype=float).reshape(-1, 3)
        q = model.pose_quats[k] if k < model.n_frames else model.identity_pose()[0]
        t = model.root_translations[k] if k < model.n_frames else np.zeros(3)
        frames_obs.append([ids, pts, q.copy(), t.copy()])
    return frames_obs


def _fit_sse(model, frames_obs):
    sse = 0.0
    for ids, pts, q, t in frames_obs:
        G = joint_transforms(model, q, t)
        y = np.einsum("mij,nj->nmi", G[:, :3, :3], model.rest_vertices[ids]) + G[:, :3, 3]
        v = np.einsum("nm,nmi->ni", model.weights[ids], y)
        sse += float(np.sum((v - pts) ** 2))
    return sse


def _total_loss(model, frames_obs, g_geo, joints0, cfg, total_obs):
    fit = _fit_sse(model, frames_obs) / total_obs
    finite = np.isfinite(g_geo)
    reg_w = float(np.sum(g_geo[finite] * model.weights[finite] ** 2))
    reg_j = float(np.sum((model.joints - joints0) ** 2))
    return fit + cfg.lambda_g * reg_w + cfg.lambda_j * reg_j, fit


def refine(
    model0: SkinnedBodyModel,
    clouds,
    layout: SuitLayout,
    cfg: RefineConfig | None = None,
    verbose: bool = False,
) -> RefineResult:
    """Alternating refinement of weights, joints, rest pose, and per-frame poses."""
    cfg = cfg or RefineConfig()
    model = model0.copy()
    K = len(clouds)
    if model.n_frames != K:
        q0, t0 = model.identity_pose()
        model.pose_quats = np.tile(q0, (K, 1, 1))
        model.root_translations = np.tile(t0, (K, 1))

    frames_obs = _prepare_frames(model, clouds)
    total_obs = sum(len(ids) for ids, _, _, _ in frames_obs)
    if total_obs == 0:
        raise ValueError("refine needs at least one observation")
    observed = np.zeros(model.n_vertices, dtype=bool)
    for ids, _, _, _ in frames_obs:
        observed[ids] = True
    unobserved = np.where(~observed)[0]

    g_geo = geodesic_weights(layout, model.rest_vertices, model.weights)
    joints0 = model.joints.copy()

    loss_trace = []
    fit_trace = []
    prev = np.inf
    for it in range(cfg.outer_iterations):
        # (1) poses, each frame independently
        for fo in frames_obs:
            ids, pts, q, t = fo
            q_new, t_new, _ = _fit_pose_frame(model, q, t, ids, pts, cfg.pose_iterations)
            fo[2], fo[3] = q_new, t_new

        # (2) weights, each vertex independently
        _solve_weights(model, frames_obs, g_geo, cfg.lambda_g, total_obs)

        # (3) joints
        model.joints = _fit_joints(model, frames_obs, cfg.lambda_j, joints0, total_obs, cfg.joint_iterations)

        # (4) rest positions
        _solve_rest(model, frames_obs)

        loss, fit = _total_loss(model, frames_obs, g_geo, joints0, cfg, total_obs)
        loss_trace.append(loss)
        fit_trace.append(np.sqrt(fit))
        if verbose:
            print(f"  outer {it:3d}  loss {loss:.9g}  fit-rms {np.sqrt(fit):.6g} mm")
        if prev - loss <= cfg.convergence_tol * max(abs(prev), 1e-30) and it >= 1:
            break
        prev = loss

    if cfg.prune_top and cfg.prune_top < model.n_joints:
        _prune_weights(model, cfg.prune_top)

    model.pose_quats = np.array([fo[2] for fo in frames_obs])
    model.root_translations = np.array([fo[3] for fo in frames_obs])
    model.validate()
    return RefineResult(model, loss_trace, fit_trace, unobserved)


def _solve_weights(model, frames_obs, g_geo, lambda_g, total_obs):
    N, M = model.weights.shape
    Qacc = np.zeros((N, M, M))
    cacc = np.zeros((N, M))
    seen = np.zeros(N, dtype=bool)
    for ids, pts, q, t in frames_obs:
        G = joint_transforms(model, q, t)
        y = np.einsum("mij,nj->nmi", G[:, :3, :3], model.rest_vertices[ids]) + G[:, :3, 3]
        Qacc[ids] += np.einsum("nmi,nli->nml", y, y)
        cacc[ids] += np.einsum("nmi,ni->nm", y, pts)
        seen[ids] = True

    scale = 2.0 / total_obs
    for i in np.where(seen)[0]:
        Q = scale * Qacc[i] + 2.0 * lambda_g * np.diag(np.where(np.isfinite(g_geo[i]), g_geo[i], 0.0))
        c = scale * cacc[i]
        forced = ~np.isfinite(g_geo[i])
        model.weights[i] = simplex_qp(Q, c, forced_zero=forced)


def _solve_rest(model, frames_obs):
    N = model.n_vertices
    H = np.zeros((N, 3, 3))
    b = np.zeros((N, 3))
    seen = np.zeros(N, dtype=bool)
    for ids, pts, q, t in frames_obs:
        G = joint_transforms(model, q, t)
        lin = np.einsum("nm,mij->nij", model.weights[ids], G[:, :3, :3])
        tr = model.weights[ids] @ G[:, :3, 3]
        H[ids] += np.einsum("nij,nik->njk", lin, lin)
        b[ids] += np.einsum("nij,ni->nj", lin, pts - tr)
        seen[ids] = True
    idx = np.where(seen)[0]
    model.rest_vertices[idx] = np.linalg.solve(H[idx], b[idx][..., None])[..., 0]


def _prune_weights(model, top):
    W = model.weights
    order = np.argsort(W, axis=1)
    cut = order[:, : W.shape[1] - top]
    np.put_along_axis(W, cut, 0.0, axis=1)
    sums = W.sum(axis=1, keepdims=True)
    sums[sums == 0] = 1.0
    model.weights = W / sums


# ---------------------------------------------------------------------------
# evaluation helpers


def fit_poses(model: SkinnedBodyModel, clouds, iterations: int = 20):
    """Fit per-frame poses with shape frozen; returns (quats (K,M,4), roots (K,3), sse)."""
    quats = []
    roots = []
    sse = 0.0
    q0, t0 = model.identity_pose()
    for cloud in clouds:
        ids = np.array(sorted(i for i in cloud.points if i < model.n_vertices), dtype=int)
        pts = np.array([cloud.points[int(i)].position for i in ids], dtype=float).reshape(-1, 3)
        q, t, c = _fit_pose_frame(model, q0, t0, ids, pts, iterations)
        quats.append(q)
        roots.append(t)
        sse += c
    return np.array(quats), np.array(roots), sse


def fitting_rms(model: SkinnedBodyModel, clouds, iterations: int = 20) -> float:
    """Held-out fitting error: RMS distance after pose-only fits (shape frozen)."""
    _, _, sse = fit_poses(model, clouds, iterations)
    n = sum(len([i for i in c.points if i < model.n_vertices]) for c in clouds)
    return float(np.sqrt(sse / max(n, 1)))
