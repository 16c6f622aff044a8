import numpy as np
import pytest

from partfield import kinematics as kin
from partfield.geometry import RigidTransform, axis_angle_matrix, random_rotation
from partfield.structure import Edge, KinematicTree, candidates_world_np


def _chain(parts=3, length=0.6):
    """Straight chain of `parts` single-part groups along +x."""
    radii = np.full((parts, 3), [0.4, 0.2, 0.2])
    rot = np.broadcast_to(np.eye(3), (parts, 3, 3)).copy()
    trans = np.zeros((parts, 3))
    trans[:, 0] = np.arange(parts) * length
    edges = [Edge(i, i + 1, (i, 0), (i + 1, 3)) for i in range(parts - 1)]
    tree = KinematicTree(parts, edges)
    groups = [[i] for i in range(parts)]
    return rot, trans, radii, tree, groups


def test_repose_empty_edit_is_identity():
    rot, trans, radii, tree, groups = _chain()
    r2, t2 = kin.repose(rot, trans, radii, tree, groups, kin.PoseEdit())
    np.testing.assert_array_equal(r2, rot)
    np.testing.assert_array_equal(t2, trans)


def test_repose_inverse_restores_exactly():
    rot, trans, radii, tree, groups = _chain()
    edit = kin.PoseEdit([kin.RotationEdit(1, (0, 0, 1), 0.7), kin.RotationEdit(1, (0, 0, 1), -0.7)])
    r2, t2 = kin.repose(rot, trans, radii, tree, groups, edit)
    np.testing.assert_allclose(r2, rot, atol=1e-9)
    np.testing.assert_allclose(t2, trans, atol=1e-9)


def test_repose_hinge_preserves_joint_distance():
    rot, trans, radii, tree, groups = _chain(parts=2)
    cands = candidates_world_np(rot[None], trans[None], radii)[0]
    joint = 0.5 * (cands[0, 0] + cands[1, 3])
    edit = kin.PoseEdit([kin.RotationEdit(0, (0, 0, 1), np.pi / 2)])
    _, t2 = kin.repose(rot, trans, radii, tree, groups, edit)
    before = np.linalg.norm(trans[1] - joint)
    after = np.linalg.norm(t2[1] - joint)
    assert after == pytest.approx(before, abs=1e-12)
    np.testing.assert_array_equal(t2[0], trans[0])


def test_repose_preserves_intra_subtree_distances():
    rot, trans, radii, tree, groups = _chain(parts=4)
    edit = kin.PoseEdit([kin.RotationEdit(0, (0, 1, 0), 0.9)])
    _, t2 = kin.repose(rot, trans, radii, tree, groups, edit)
    # parts 1..3 rotate rigidly together about edge 0's joint
    for a in (1, 2, 3):
        for b in (1, 2, 3):
            d_before = np.linalg.norm(trans[b] - trans[a])
            assert np.linalg.norm(t2[b] - t2[a]) == pytest.approx(d_before, abs=1e-9)


def test_repose_sequential_equals_single_document():
    rot, trans, radii, tree, groups = _chain(parts=4)
    e1 = kin.RotationEdit(0, (0, 1, 0), 0.9)
    e2 = kin.RotationEdit(2, (0, 0, 1), -1.2)
    r_doc, t_doc = kin.repose(rot, trans, radii, tree, groups, kin.PoseEdit([e1, e2]))
    r_mid, t_mid = kin.repose(rot, trans, radii, tree, groups, kin.PoseEdit([e1]))
    r_seq, t_seq = kin.repose(r_mid, t_mid, radii, tree, groups, kin.PoseEdit([e2]))
    np.testing.assert_allclose(r_doc, r_seq, atol=1e-12)
    np.testing.assert_allclose(t_doc, t_seq, atol=1e-12)


def test_repose_disjoint_subtrees_commute():
    # star: root 0 with children 1 and 2
    radii = np.full((3, 3), [0.3, 0.2, 0.2])
    rot = np.broadcast_to(np.eye(3), (3, 3, 3)).copy()
    trans = np.array([[0.0, 0, 0], [0.5, 0, 0], [-0.5, 0, 0]])
    tree = KinematicTree(3, [Edge(0, 1, (0, 0), (1, 3)), Edge(0, 2, (0, 3), (2, 0))])
    groups = [[0], [1], [2]]
    e1 = kin.RotationEdit(0, (0, 0, 1), 0.5)
    e2 = kin.RotationEdit(1, (0, 1, 0), -0.8)
    r_a, t_a = kin.repose(rot, trans, radii, tree, groups, kin.PoseEdit([e1, e2]))
    r_b, t_b = kin.repose(rot, trans, radii, tree, groups, kin.PoseEdit([e2, e1]))
    np.testing.assert_allclose(r_a, r_b, atol=1e-12)
    np.testing.assert_allclose(t_a, t_b, atol=1e-12)


def test_repose_unknown_edge():
    rot, trans, radii, tree, groups = _chain()
    with pytest.raises(kin.UnknownEdgeError):
        kin.repose(rot, trans, radii, tree, groups, kin.PoseEdit([kin.RotationEdit(7, (0, 0, 1), 0.1)]))


def test_repose_root_transform():
    rot, trans, radii, tree, groups = _chain(parts=2)
    root = RigidTransform(axis_angle_matrix([0, 0, 1], 0.3), np.array([0.1, -0.2, 0.05]))
    r2, t2 = kin.repose(rot, trans, radii, tree, groups, kin.PoseEdit([], root=root))
    np.testing.assert_allclose(r2[1], root.rotation, atol=1e-12)
    np.testing.assert_allclose(t2[1], root.apply(trans[1]), atol=1e-12)


def test_pose_edit_roundtrip(tmp_path):
    edit = kin.PoseEdit(
        [kin.RotationEdit(0, (0.0, 0.0, 1.0), 0.7854)],
        root=RigidTransform(np.eye(3), np.array([0.0, 0.1, 0.0])),
    )
    path = tmp_path / "edit.json"
    edit.save(path)
    loaded = kin.PoseEdit.load(path)
    assert loaded.to_dict() == edit.to_dict()


# ---------------------------------------------------------------------------
# mapping


def test_fit_mapping_identity():
    rng = np.random.default_rng(0)
    src = rng.normal(size=(30, 4, 3))
    m = kin.fit_mapping(src, src, lambda_ridge=0.0)
    np.testing.assert_allclose(m.matrix, np.eye(12), atol=1e-8)


def test_fit_mapping_scaling():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(30, 4, 3))
    m = kin.fit_mapping(src, 2.0 * src, lambda_ridge=0.0)
    np.testing.assert_allclose(m.matrix, 2.0 * np.eye(12), atol=1e-8)


def test_fit_mapping_matches_pseudoinverse():
    rng = np.random.default_rng(2)
    src = rng.normal(size=(50, 3, 3))
    x_true = rng.normal(size=(6, 9))
    tgt = (src.reshape(50, -1) @ x_true.T + 0.01 * rng.normal(size=(50, 6))).reshape(50, 2, 3)
    m = kin.fit_mapping(src, tgt, lambda_ridge=0.0)
    s = src.reshape(50, -1)
    x_pinv = (np.linalg.pinv(s) @ tgt.reshape(50, -1)).T
    np.testing.assert_allclose(m.matrix, x_pinv, atol=1e-8)
    assert m.residual(src, tgt) <= np.linalg.norm(tgt) + 1e-12


def test_fit_mapping_singular_requires_ridge():
    src = np.zeros((5, 2, 3))
    tgt = np.ones((5, 2, 3))
    with pytest.raises(ValueError, match="lambda_ridge"):
        kin.fit_mapping(src, tgt, lambda_ridge=0.0)
    m = kin.fit_mapping(src, tgt, lambda_ridge=1e-4)  # ridge makes it solvable
    assert np.isfinite(m.matrix).all()


def test_fit_mapping_residual_monotone_in_ridge():
    rng = np.random.default_rng(3)
    src = rng.normal(size=(20, 3, 3))
    tgt = rng.normal(size=(20, 2, 3))
    residuals = [kin.fit_mapping(src, tgt, lam).residual(src, tgt) for lam in (1.0, 1e-2, 1e-4, 0.0)]
    assert all(residuals[i] >= residuals[i + 1] - 1e-9 for i in range(len(residuals) - 1))


# ---------------------------------------------------------------------------
# procrustes


def test_procrustes_identity():
    pts = np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 1], [0.3, 0.2, -0.5]]).T
    np.testing.assert_allclose(kin.fit_rotation_procrustes(pts, pts), np.eye(3), atol=1e-12)


def test_procrustes_exact_recovery():
    rng = np.random.default_rng(4)
    local = rng.normal(size=(3, 6))
    for _ in range(100):
        r0 = random_rotation(rng)
        r = kin.fit_rotation_procrustes(local, r0 @ local)
        np.testing.assert_allclose(r, r0, atol=1e-9)
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0)


def test_procrustes_noisy_beats_random_rotations():
    rng = np.random.default_rng(5)
    local = rng.normal(size=(3, 8))
    r0 = random_rotation(rng)
    world = r0 @ local + 0.05 * rng.normal(size=(3, 8))
    r = kin.fit_rotation_procrustes(local, world)
    best = np.linalg.norm(r @ local - world)
    for _ in range(1000):
        rr = random_rotation(rng)
        assert best <= np.linalg.norm(rr @ local - world) + 1e-12


def test_procrustes_rank_deficient():
    local = np.zeros((3, 6))
    local[0] = np.arange(6)  # collinear points
    with pytest.raises(ValueError, match="part 3"):
        kin.fit_rotation_procrustes(local, local, label="part 3")


# ---------------------------------------------------------------------------
# metrics


def test_mpjpe_examples():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(7, 5, 3))
    assert kin.mpjpe(a, a) == 0.0
    offset = np.array([0.3, -0.4, 1.2])
    assert kin.mpjpe(a + offset, a) == pytest.approx(np.linalg.norm(offset))
    b = rng.normal(size=(7, 5, 3))
    manual = np.linalg.norm(a - b, axis=-1).mean()
    assert kin.mpjpe(a, b) == pytest.approx(manual)
    with pytest.raises(ValueError):
        kin.mpjpe(a, b[:, :4])


def test_psnr_identical_capped():
    img = np.random.default_rng(7).random((16, 16, 3))
    assert kin.psnr(img, img) == kin.PSNR_CAP_DB


def test_ssim_identical_and_inverse():
    rng = np.random.default_rng(8)
    img = rng.random((24, 24))
    assert kin.ssim(img, img) == pytest.approx(1.0)
    assert kin.ssim(img, 1.0 - img) <= 0.0


def test_ssim_rgb_channels_averaged():
    rng = np.random.default_rng(9)
    img = rng.random((24, 24, 3))
    per = np.mean([kin.ssim(img[..., c], img[..., c] * 0.8) for c in range(3)])
    assert kin.ssim(img, img * 0.8) == pytest.approx(per)


def test_mask_iou():
    a = np.zeros((8, 8))
    b = np.zeros((8, 8))
    a[:4] = 1.0
    b[4:] = 1.0
    assert kin.mask_iou(a, b) == 0.0
    assert kin.mask_iou(a, a) == 1.0
    b2 = np.zeros((8, 8))
    b2[:2] = 1.0
    assert kin.mask_iou(a, b2) == pytest.approx(0.5)
