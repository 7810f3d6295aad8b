import numpy as np
import pytest

from subsetlift import autodiff as ad
from subsetlift import linalg
from subsetlift import subset_loss as sl
from subsetlift.errors import DegenerateScaleError, InvalidBatchError, InvalidInputError, InvalidSubsetError

from helpers import central_difference, rel_err, rigid_batch


def _loss(c, cfg=None, alignment=None):
    return float(sl.subset_loss(c, cfg, alignment=alignment).value)


def _random_batches(count, seed):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        nb = int(rng.integers(2, 9))
        k = int(rng.integers(3, 17))
        yield rng, rng.normal(size=(nb, k, 3))


def test_rigid_motion_invariance():
    for rng, c in _random_batches(50, 0):
        moved = np.array([x @ linalg.random_rotation(rng).T + rng.normal(size=3) * 5 for x in c])
        assert abs(_loss(c) - _loss(moved)) < 1e-6


def test_identical_shapes_leave_no_residual():
    rng = np.random.default_rng(11)
    for _ in range(5):
        shape = rng.normal(size=(7, 3))
        e, _ = sl.align_and_residual(np.broadcast_to(shape, (5, 7, 3)).copy())
        # zero up to the rounding of the SVD and Kabsch steps
        assert np.abs(e.value).max() < 1e-12


def test_global_scale_invariance():
    for rng, c in _random_batches(50, 1):
        s = float(np.exp(rng.uniform(-3, 3)))
        assert abs(_loss(c) - _loss(s * c)) < 1e-6


def test_permutation_invariance():
    for rng, c in _random_batches(50, 2):
        kp = rng.permutation(c.shape[1])
        bp = rng.permutation(c.shape[0])
        assert abs(_loss(c) - _loss(c[:, kp])) < 1e-6
        assert abs(_loss(c) - _loss(c[bp])) < 1e-6


@pytest.mark.parametrize("nb,k", [(2, 3), (6, 8), (16, 5), (128, 32)])
def test_rigid_batch_reaches_floor(nb, k):
    rng = np.random.default_rng(nb * k)
    c = rigid_batch(rng, rng.normal(size=(k, 3)), nb)
    e, _ = sl.align_and_residual(c)
    assert np.linalg.norm(e.value) < 1e-6
    assert abs(_loss(c) - sl.loss_floor(nb, k)) < 1e-6


def test_mirrored_rigid_batch_also_reaches_floor():
    rng = np.random.default_rng(9)
    c = rigid_batch(rng, rng.normal(size=(10, 3)), 7) * np.array([1.0, 1.0, -1.0])
    assert abs(_loss(c) - sl.loss_floor(7, 10)) < 1e-6


def test_nonrigid_batch_is_above_floor():
    rng = np.random.default_rng(4)
    c = rng.normal(size=(8, 10, 3))
    assert _loss(c) > sl.loss_floor(8, 10) + 1.0


def test_frozen_alignment_gradient_matches_finite_differences():
    for rng, c in _random_batches(20, 5):
        _, frozen = sl.align_and_residual(c)
        x = ad.Tensor(c, requires_grad=True)
        with ad.Tape():
            ad.backward(sl.subset_loss(x, alignment=frozen))
        numeric = central_difference(lambda v: _loss(v, alignment=frozen), c)
        assert rel_err(x.grad, numeric) < 1e-3


def test_gradient_is_translation_free():
    c = np.random.default_rng(6).normal(size=(5, 7, 3))
    x = ad.Tensor(c, requires_grad=True)
    with ad.Tape():
        ad.backward(sl.subset_loss(x))
    np.testing.assert_allclose(x.grad.sum(axis=1), 0.0, atol=1e-10)


def test_input_validation():
    with pytest.raises(InvalidBatchError):
        sl.subset_loss(np.zeros((1, 5, 3)) + np.arange(5.0)[:, None])
    with pytest.raises(InvalidSubsetError):
        sl.subset_loss(np.random.default_rng(0).normal(size=(4, 2, 3)))
    with pytest.raises(InvalidInputError):
        sl.subset_loss(np.full((3, 4, 3), np.nan))
    with pytest.raises(DegenerateScaleError):
        sl.subset_loss(np.ones((3, 4, 3)))


def test_perspective_scale_uses_mean_depth():
    rng = np.random.default_rng(7)
    c = rng.normal(size=(4, 6, 3))
    c[..., 2] += 10.0
    _, align = sl.align_and_residual(c, "perspective-mean-depth")
    assert align.scale == pytest.approx(c[..., 2].mean(), rel=1e-14)
    c[..., 2] -= 20.0
    with pytest.raises(DegenerateScaleError):
        sl.align_and_residual(c, "perspective-mean-depth")


def test_config_validation():
    sl.SubsetLossConfig(sizes_random=[8], sizes_nn=[16, 32]).validate(60)
    with pytest.raises(InvalidSubsetError):
        sl.SubsetLossConfig(sizes_nn=[64]).validate(60)
    with pytest.raises(InvalidSubsetError):
        sl.SubsetLossConfig(sizes_nn=[2]).validate(60)
    with pytest.raises(InvalidInputError):
        sl.SubsetLossConfig(sizes_nn=[]).validate(60)
    with pytest.raises(InvalidInputError):
        sl.SubsetLossConfig(scale_mode="median").validate()


def test_random_subsets_are_uniform():
    # chi-square test of inclusion counts: each index is included with probability k/K
    rng = np.random.default_rng(10)
    num, k, draws = 20, 5, 4000
    counts = np.zeros(num)
    for _ in range(draws):
        choice = sl.select_random(num, k, rng)
        assert len(np.unique(choice.indices)) == k
        counts[choice.indices] += 1
    expected = draws * k / num
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 43.8  # 99.9% quantile with 19 degrees of freedom


def test_neighborhood_matches_brute_force():
    rng = np.random.default_rng(11)
    pts = rng.normal(size=(4, 15, 3))
    traj = pts.transpose(1, 0, 2).reshape(15, -1)
    for seed_index in range(15):
        choice = sl.select_neighborhood(pts, 6, rng, seed_index=seed_index)
        assert choice.indices[0] == seed_index
        dist = np.linalg.norm(traj - traj[seed_index], axis=1)
        others = sorted((d, i) for i, d in enumerate(dist) if i != seed_index)
        assert list(choice.indices[1:]) == [i for _, i in others[:5]]


def test_neighborhood_ties_prefer_lower_index():
    pts = np.zeros((2, 5, 3))
    pts[:, 0] = 1.0
    choice = sl.select_neighborhood(pts, 3, None, seed_index=0)
    assert list(choice.indices) == [0, 1, 2]


def test_draw_subsets_order_and_count():
    rng = np.random.default_rng(12)
    cfg = sl.SubsetLossConfig(sizes_random=[4], sizes_nn=[3, 5], subsets_per_batch=2)
    specs = sl.draw_subsets(rng.normal(size=(3, 10, 3)), cfg, rng)
    assert [(s.strategy, len(s)) for s in specs] == [("random", 4)] * 2 + [("nearest-neighbor", 3)] * 2 + [("nearest-neighbor", 5)] * 2


def test_batch_loss_is_mean_over_subsets():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(5, 12, 3))
    cfg = sl.SubsetLossConfig(sizes_random=[4, 6], sizes_nn=[5], subsets_per_batch=3)
    specs = sl.draw_subsets(x, cfg, rng)
    total = sl.batch_subset_loss(x, cfg, subsets=specs).value
    direct = np.mean([_loss(x[:, s.indices]) for s in specs])
    assert total == pytest.approx(direct, rel=1e-12)
