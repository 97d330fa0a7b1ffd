import numpy as np
import pytest

from suitcap.errors import InsufficientSeeds
from suitcap.meshes import vertex_normals
from suitcap.reconstruct import LabeledPointCloud, PointRecord
from suitcap.registration import TemplateModel, load_template, register_icp, save_template
from suitcap.simulator import truth_clouds, tube_scene


@pytest.fixture(scope="module")
def template_scene():
    scene = tube_scene(strips=6, codes_per_strip=10, seed=9)
    template = TemplateModel(
        vertices=scene.model.rest_vertices,
        triangles=scene.triangles,
        joints=scene.model.joints,
        parents=scene.model.parents,
        weights=scene.model.weights,
    )
    return scene, template


def surface_cloud(template, rng, n_pts, frame=0):
    tris = rng.integers(0, len(template.triangles), n_pts)
    bary = rng.dirichlet([1.0, 1.0, 1.0], n_pts)
    pts = np.einsum("nc,nci->ni", bary, template.vertices[template.triangles[tris]])
    cloud = LabeledPointCloud(frame)
    for i in range(n_pts):
        cloud.points[i] = PointRecord(pts[i], (0, 1), 0.0)
    return cloud, tris, bary, pts


def test_self_registration_is_exact(template_scene, rng):
    scene, template = template_scene
    cloud, tris, bary, pts = surface_cloud(template, rng, scene.layout.n_corners)
    seeds = {i: (int(tris[i]), bary[i]) for i in range(12)}
    res = register_icp(cloud, template, seeds, scene.layout)
    assert res.mean_residuals[-1] < 1e-6
    assert np.abs(res.model.rest_vertices - pts).max() < 1e-6
    assert np.abs(res.model.weights.sum(axis=1) - 1.0).max() < 1e-9


def test_registration_with_normal_noise(template_scene, rng):
    scene, template = template_scene
    n = scene.layout.n_corners
    cloud, tris, bary, pts = surface_cloud(template, rng, n)
    normals = vertex_normals(template.vertices, template.triangles)
    vn = np.einsum("nc,nci->ni", bary, normals[template.triangles[tris]])
    vn /= np.linalg.norm(vn, axis=1, keepdims=True)
    offsets = rng.normal(0.0, 1.0, n)
    for i in range(n):
        cloud.points[i] = PointRecord(pts[i] + offsets[i] * vn[i], (0, 1), 0.0)
    seeds = {i: (int(tris[i]), bary[i]) for i in range(14)}
    res = register_icp(cloud, template, seeds, scene.layout)
    assert res.mean_residuals[-1] <= 1.5  # mm


def test_insufficient_seeds_raises(template_scene, rng):
    scene, template = template_scene
    cloud, tris, bary, _ = surface_cloud(template, rng, 100)
    seeds = {i: (int(tris[i]), bary[i]) for i in range(9)}
    with pytest.raises(InsufficientSeeds):
        register_icp(cloud, template, seeds, scene.layout)


def test_hidden_corners_registered_from_later_frames(template_scene, rng):
    """Corners unobserved initially are picked up from subsequent frames."""
    scene, template = template_scene
    K = 6
    clouds = truth_clouds(scene, K)
    full0 = clouds[0]
    n = scene.layout.n_corners
    hide = set(rng.choice(sorted(full0.points), size=n // 10, replace=False).tolist())
    for i in hide:
        del full0.points[i]

    # seeds: exact correspondences for a few observed corners, derived from the
    # generative model (identity pose frame 0 equals the rest pose surface)
    from suitcap.meshes import closest_point_on_triangles

    seed_ids = sorted(full0.points)[:15]
    seeds = {}
    for cid in seed_ids:
        p = full0.points[cid].position
        cp, cb = closest_point_on_triangles(p, template.vertices[template.triangles])
        t = int(np.argmin(np.linalg.norm(cp - p, axis=1)))
        seeds[cid] = (t, cb[t])
    res = register_icp(full0, template, seeds, scene.layout, extra_clouds=clouds[1:])
    observed_anywhere = set()
    for c in [full0] + clouds[1:]:
        observed_anywhere.update(c.points)
    assert res.registered[sorted(observed_anywhere)].all()
    assert res.registered.sum() >= n - 5  # near-total coverage including revealed corners


def test_template_file_roundtrip(template_scene, tmp_path):
    _, template = template_scene
    path = tmp_path / "template.json"
    save_template(template, path)
    back = load_template(path)
    assert np.array_equal(back.vertices, template.vertices)
    assert np.array_equal(back.triangles, template.triangles)
    assert np.array_equal(back.joints, template.joints)
    assert np.array_equal(back.parents, template.parents)
    assert np.array_equal(back.weights, template.weights)
