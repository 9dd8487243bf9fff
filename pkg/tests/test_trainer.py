import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from graphsplat.core import GaussianCloud, KernelGraph, ProjectionStack, ScanGeometry, uniform_angles
from graphsplat.errors import InvalidParameterError
from graphsplat.graph import GraphConfig, density_difference_sums, graph_for_cloud
from graphsplat.losses import LossWeights, total_loss
from graphsplat.render import KernelGradients, render_backward, render_view
from graphsplat.trainer import (AdamState, AdcState, TrainConfig, accumulate_adc, adam_step,
                                check_stop, densify_and_prune, lr_at, pga_term,
                                project_parameters, train)

from conftest import random_cloud, small_geometry

BOX = np.array([[-1.0] * 3, [1.0] * 3])


# ---------------------------------------------------------------- schedules


def test_lr_at_examples():
    assert lr_at(0, 1000, 0.01, 0.1) == 0.01
    assert lr_at(1000, 1000, 0.01, 0.1) == pytest.approx(1e-3, rel=1e-12)
    assert lr_at(500, 1000, 0.01, 0.1) == pytest.approx(3.1623e-3, rel=1e-4)
    with pytest.raises(InvalidParameterError):
        lr_at(1001, 1000, 0.01, 0.1)


@given(st.integers(1, 5000), st.floats(0.01, 1.0))
def test_lr_at_monotone(n, floor):
    lrs = [lr_at(i, n, 1.0, floor) for i in np.linspace(0, n, 17).astype(int)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] == pytest.approx(floor, rel=1e-12)


def test_train_config_validation():
    for bad in ({"lr_density": 0}, {"decay_floor_fraction": 0}, {"decay_floor_fraction": 1.5},
                {"adc_interval": 0}, {"max_iters": -1}, {"density_param": "exp"},
                {"max_kernels": 0}, {"tau_pos": -1}):
        with pytest.raises(InvalidParameterError):
            TrainConfig(**bad)
    assert TrainConfig(max_iters=1000).adc_stop == 500


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_keeps_parameters():
    p = np.arange(6.0).reshape(3, 2)
    state = AdamState.zeros_like(p)
    new, state, skipped = adam_step(p, np.zeros_like(p), state, 0.1)
    np.testing.assert_array_equal(new, p)
    assert state.t.tolist() == [1, 1, 1] and skipped.size == 0


def test_adam_constant_gradient_step_tends_to_lr():
    p = np.zeros((4, 3))
    g = np.array([[1.0, -2.0, 0.5]] * 3 + [[1e-3, 5.0, -7.0]])
    state = AdamState.zeros_like(p)
    lr = 0.01
    for _ in range(50):
        prev = p
        p, state, _ = adam_step(p, g, state, lr)
    step = np.abs(p - prev)
    np.testing.assert_allclose(step, lr, rtol=0.01)
    assert np.all(np.sign(prev - p) == np.sign(g))


def test_adam_skips_nonfinite_rows(caplog):
    p = np.ones((3, 2))
    g = np.array([[1.0, 1.0], [np.nan, 1.0], [1.0, np.inf]])
    state = AdamState.zeros_like(p)
    new, state, skipped = adam_step(p, g, state, 0.1)
    assert skipped.tolist() == [1, 2]
    np.testing.assert_array_equal(new[1:], p[1:])
    assert state.t.tolist() == [1, 0, 0]
    assert not state.m[1:].any()
    assert "non-finite" in caplog.text


def test_projection_clamps():
    rho, pos, scale, rot = project_parameters(np.array([-0.5, 0.2]), np.array([[2.0, 0, -3], [0, 0, 0]]),
                                              np.array([[-1.0, 1, 1], [1, 1, 1]]),
                                              np.array([[2.0, 0, 0, 0], [0, 3, 4, 0]]), BOX)
    assert rho.tolist() == [0.0, 0.2]
    assert pos[0].tolist() == [1.0, 0.0, -1.0]
    assert scale[0, 0] == 1e-6
    np.testing.assert_allclose(np.linalg.norm(rot, axis=1), 1.0)


def test_adam_shape_mismatch():
    with pytest.raises(InvalidParameterError):
        adam_step(np.zeros(3), np.zeros(4), AdamState.zeros_like(np.zeros(3)), 0.1)


# ---------------------------------------------------------------- ADC statistics


def _two_node():
    cloud = GaussianCloud([1.0, 0.1], [[0, 0, 0], [0.1, 0, 0]], [[0.1] * 3] * 2,
                          [[1.0, 0, 0, 0]] * 2, BOX)
    graph = KernelGraph.from_edges(2, [(0, 1)], [0.5], scaling_k=6.0)
    return cloud, graph


def _grads(ndc, hit):
    m = len(hit)
    g = KernelGradients.zeros(m)
    g.d_ndc = np.asarray(ndc, dtype=np.float64)
    g.contributed = np.asarray(hit, dtype=bool)
    return g


def test_accumulate_adc_arithmetic_example():
    cloud, graph = _two_node()
    adc = accumulate_adc(AdcState.zeros(2), _grads([[0.0006, 0.0008], [0, 0]], [True, False]),
                         cloud, graph, 1e-4, 6.0)
    assert adc.grad_sum[0] == pytest.approx(1.015e-3, rel=1e-12)
    assert adc.grad_sum[1] == 0 and adc.view_count.tolist() == [1, 0]


def test_accumulate_adc_without_graph_term_is_plain_norm():
    cloud, graph = _two_node()
    adc = accumulate_adc(AdcState.zeros(2), _grads([[3e-4, 4e-4], [0, 1e-3]], [True, True]),
                         cloud, graph, 0.0, 6.0)
    np.testing.assert_allclose(adc.grad_sum, [5e-4, 1e-3], rtol=1e-12)


def test_accumulate_adc_once_per_interval_mode():
    cloud, graph = _two_node()
    adc = AdcState.zeros(2)
    for _ in range(3):
        adc = accumulate_adc(adc, _grads([[1e-3, 0], [0, 0]], [True, False]), cloud, graph,
                             1e-4, 6.0, per_view=False)
    np.testing.assert_allclose(adc.averages(), [1e-3, 0])
    np.testing.assert_allclose(adc.graph_term, [1.5e-5, 1.5e-5])


def test_accumulated_average_matches_recomputation(rng):
    cloud = random_cloud(rng, 12)
    graph = graph_for_cloud(cloud, GraphConfig(knn_k=4))
    geo = small_geometry("cone", views=2)
    extra = 1e-4 * density_difference_sums(cloud, graph) / graph.scaling_k
    adc = AdcState.zeros(len(cloud))
    per_view = []
    for v in range(2):
        img = render_view(cloud, geo, v, graph)
        meas = rng.uniform(0, img.max(), size=img.shape)
        _, lg = total_loss(img, meas, None, cloud, graph, LossWeights(lambda_tv=0), 1.0)
        kg = render_backward(cloud, geo, v, lg.d_image, graph)
        adc = accumulate_adc(adc, kg, cloud, graph, 1e-4, graph.scaling_k)
        per_view.append(np.where(kg.contributed, np.linalg.norm(kg.d_ndc, axis=1) + extra, np.nan))
    expected = np.nanmean(np.stack(per_view), axis=0)
    seen = ~np.all(np.isnan(np.stack(per_view)), axis=0)
    np.testing.assert_allclose(adc.averages()[seen], expected[seen], rtol=1e-12)


@given(st.floats(0, 10), st.floats(0, 10))
def test_graph_term_strictly_increasing_in_density_difference(a, b):
    if abs(a - b) < 1e-9:
        return
    lo, hi = sorted((a, b))
    graph = KernelGraph.from_edges(2, [(0, 1)], [1.0])
    terms = []
    for diff in (lo, hi):
        cloud = GaussianCloud([diff, 0.0], [[0, 0, 0], [0.1, 0, 0]], [[0.1] * 3] * 2,
                              [[1.0, 0, 0, 0]] * 2, BOX)
        terms.append(pga_term(cloud, graph, 1e-4, 6.0)[0])
    assert terms[1] > terms[0]


# ---------------------------------------------------------------- densify / prune


def _adc_with(avg, m):
    adc = AdcState.zeros(m)
    adc.grad_sum = np.asarray(avg, dtype=np.float64)
    adc.view_count = np.ones(m, dtype=np.int64)
    return adc


def test_densify_nothing_over_threshold_only_prunes(rng):
    cloud = random_cloud(rng, 5).replace(rho=[0.5, 5e-5, 0.3, 0.2, 0.9])
    res = densify_and_prune(cloud, None, _adc_with([1e-5] * 5, 5), TrainConfig(), rng)
    assert len(res.cloud) == 4 and res.event.pruned == 1
    np.testing.assert_array_equal(res.keep_idx, [0, 2, 3, 4])
    assert res.appended is None


def test_split_example_without_mass_conservation(rng):
    cloud = random_cloud(rng, 3, scale=(0.005, 0.009))
    cloud = cloud.replace(scale=np.vstack([cloud.scale[:2], [[0.3, 0.1, 0.05]]]))
    cfg = TrainConfig(conserve_mass=False)
    res = densify_and_prune(cloud, None, _adc_with([0, 0, 1e-3], 3), cfg, rng)
    assert len(res.cloud) == 4 and res.event.split == 1
    kids = res.appended
    np.testing.assert_allclose(kids.scale, np.tile(cloud.scale[2] / 1.6, (2, 1)))
    np.testing.assert_allclose(kids.rho, cloud.rho[2])
    assert res.parents.tolist() == [2, 2]


def test_split_conserves_mass_by_default(rng):
    cloud = random_cloud(rng, 1, scale=(0.2, 0.3))
    res = densify_and_prune(cloud, None, _adc_with([1.0], 1), TrainConfig(), rng)
    mass = lambda c: float(np.sum(c.rho * np.prod(c.scale, axis=1)))
    assert mass(res.cloud) == pytest.approx(mass(cloud), rel=1e-12)


def test_clone_nudges_along_gradient(rng):
    cloud = random_cloud(rng, 1, scale=(0.005, 0.009))
    adc = _adc_with([1.0], 1)
    adc.position_grad = np.array([[0.0, 3.0, 0.0]])
    cfg = TrainConfig(conserve_mass=False)
    res = densify_and_prune(cloud, None, adc, cfg, rng, lr_position=0.01)
    assert res.event.cloned == 1 and len(res.cloud) == 2
    np.testing.assert_allclose(res.cloud.position[1] - cloud.position[0], [0, -0.01, 0], atol=1e-15)
    np.testing.assert_allclose(res.cloud.scale[1], cloud.scale[0])


def test_prune_never_empties_cloud(rng, caplog):
    cloud = random_cloud(rng, 3, rho=(1e-6, 1e-5))
    res = densify_and_prune(cloud, None, _adc_with([0] * 3, 3), TrainConfig(), rng)
    assert len(res.cloud) == 1 and res.event.kept_last
    assert res.keep_idx.tolist() == [int(np.argmax(cloud.rho))]


def test_kernel_cap_binds_largest_first(rng):
    cloud = random_cloud(rng, 6, scale=(0.005, 0.009))
    avg = [1e-3, 5e-3, 2e-3, 0, 9e-3, 0]
    res = densify_and_prune(cloud, None, _adc_with(avg, 6), TrainConfig(max_kernels=8), rng)
    assert len(res.cloud) == 8 and res.event.capped == 2
    assert sorted(res.parents.tolist()) == [1, 4]


# ---------------------------------------------------------------- stopping rule


def test_check_stop_examples():
    assert check_stop([(500, 30.0), (1000, 29.8)])
    assert not check_stop([(500, 30.0), (1000, 29.9)])
    assert not check_stop([(500, 30.0), (1000, 29.85)])
    assert not check_stop([(500, 30.0)])
    assert not check_stop([])
    assert not check_stop([(500, 30.0), (1000, 31.0)])


# ---------------------------------------------------------------- training loop


def _scene(seed=0):
    rng = np.random.default_rng(seed)
    truth = random_cloud(rng, 8, spread=0.3)
    geo = small_geometry("cone", views=6, rows=14, cols=14)
    stack = ProjectionStack(geo, np.stack([render_view(truth, geo, v) for v in range(6)]))
    init = truth.replace(position=truth.position + rng.normal(0, 0.03, size=(8, 3)),
                         rho=truth.rho * 0.5)
    return stack, init


def test_max_iters_zero_returns_init():
    stack, init = _scene()
    res = train(stack, init, TrainConfig(max_iters=0))
    assert res.cloud is init and res.log == []


def test_training_lowers_projection_loss():
    stack, init = _scene()
    cfg = TrainConfig(max_iters=120, adc_start=10**6, stop_check_interval=60, eval_dims=(8, 8, 8))
    res = train(stack, init, cfg, weights=LossWeights(lambda_tv=0))
    first = np.mean([r.l1 for r in res.log[:6]])
    last = np.mean([r.l1 for r in res.log[-6:]])
    assert last < first
    assert [r.iter for r in res.log] == list(range(1, 121))
    assert len(res.psnr_history) == 2


def test_training_is_deterministic():
    stack, init = _scene(1)
    cfg = TrainConfig(max_iters=60, adc_start=0, adc_interval=20, tau_pos=1e-4,
                      stop_check_interval=30, eval_dims=(8, 8, 8), seed=5)
    a = train(stack, init, cfg)
    b = train(stack, init, cfg)
    assert len(a.cloud) == len(b.cloud)
    np.testing.assert_array_equal(a.cloud.position, b.cloud.position)
    assert a.psnr_history == b.psnr_history


def test_kernel_count_respects_cap():
    stack, init = _scene(2)
    cfg = TrainConfig(max_iters=60, adc_start=0, adc_interval=10, tau_pos=0.0, max_kernels=20,
                      stop_check_interval=10**6, eval_dims=(8, 8, 8))
    res = train(stack, init, cfg, weights=LossWeights(lambda_tv=0))
    assert max(r.kernel_count for r in res.log) <= 20
    assert len(res.cloud) == 20


def test_stop_rule_ends_training_early():
    stack, init = _scene(3)
    cfg = TrainConfig(max_iters=60, adc_start=10**6, stop_check_interval=5,
                      stop_drop_fraction=0.0, eval_dims=(8, 8, 8), lr_position=0.05)
    res = train(stack, init, cfg)
    if res.stopped_early:
        assert res.log[-1].iter < 60
        assert res.psnr_history[-1][1] < res.psnr_history[-2][1]
    else:
        ps = [p for _, p in res.psnr_history]
        assert all(b >= a for a, b in zip(ps, ps[1:]))


def two_blob_scene():
    """Six dense blob kernels in two clusters and one wide, faint kernel between them.

    The faint kernel sits at the symmetry center, so its positional gradient
    cancels and only the graph term can push it over the split threshold.
    """
    blobs = np.array([[-.3, -.05, 0], [-.3, .05, 0], [-.25, 0, .05],
                      [.3, -.05, 0], [.3, .05, 0], [.25, 0, -.05]])
    dense = GaussianCloud(np.full(6, 3.0), blobs, np.full((6, 3), .05),
                          np.tile([1.0, 0, 0, 0], (6, 1)), BOX)
    flat = GaussianCloud([5e-3], [[0, 0, 0]], [[.45, .45, .06]], [[1.0, 0, 0, 0]], BOX)
    init = dense.concat(flat)
    graph = graph_for_cloud(init, GraphConfig(knn_k=6))
    geo = ScanGeometry("parallel", 24, 24, 2.0 / 24, uniform_angles(8))
    target = init.replace(rho=np.r_[init.rho[:6], 0.0])
    stack = ProjectionStack(geo, np.stack([render_view(target, geo, v, graph) for v in range(8)]))
    return stack, init


@pytest.mark.parametrize("lambda_g", [1e-4, 0.0])
def test_two_blob_flat_kernel_split_needs_graph_term(lambda_g):
    stack, init = two_blob_scene()
    cfg = TrainConfig(max_iters=500, adc_start=0, adc_end=500, lambda_g=lambda_g,
                      calibrate_density=False, split_scale_threshold=0.05,
                      stop_check_interval=10**6, eval_dims=(8, 8, 8), seed=3)
    res = train(stack, init, cfg, GraphConfig(knn_k=6), LossWeights(lambda_tv=0))
    rounds = res.events[:5]
    assert len(rounds) == 5
    splits = sum(e.split for _, e in rounds)
    wide = int(np.sum(res.cloud.scale.max(axis=1) > 0.2))
    if lambda_g > 0:
        assert rounds[0][1].split == 1 and wide == 0
    else:
        assert splits == 0 and wide == 1


def test_principal_split_keeps_mean_covariance_and_mass(rng):
    cloud = random_cloud(rng, 4, scale=(0.05, 0.3))
    cfg = TrainConfig(split_mode="principal", split_scale_threshold=0.001)
    res = densify_and_prune(cloud, None, _adc_with([1.0] * 4, 4), cfg, rng)
    assert res.event.split == 4 and len(res.cloud) == 8
    kids = res.appended
    for i in range(4):
        pair = np.flatnonzero(res.parents == i)
        w = kids.rho[pair] * np.prod(kids.scale[pair], axis=1)
        assert w.sum() == pytest.approx(cloud.rho[i] * np.prod(cloud.scale[i]), rel=1e-12)
        mean = kids.position[pair].mean(axis=0)
        np.testing.assert_allclose(mean, cloud.position[i], atol=1e-14)
        cov = kids.covariances()[pair].mean(axis=0)
        d = kids.position[pair] - mean
        cov += d.T @ d / 2
        np.testing.assert_allclose(cov, cloud.covariances()[i], atol=1e-14)


def test_split_mode_validation():
    with pytest.raises(InvalidParameterError):
        TrainConfig(split_mode="random")
