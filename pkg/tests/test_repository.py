"""Prompt repository: retrieval ranking, aggregation, gradient flow."""

import numpy as np
import pytest

from vaps import numcore as nc
from vaps.errors import ConfigError, DegenerateInputError, ShapeError
from vaps.repository import (PromptRepository, aggregate, init_repository, retrieve,
                             top_n_indices)


def _repo_from(keys, prompts, n_select):
    return PromptRepository(keys=nc.param(np.asarray(keys, float)),
                            prompts=nc.param(np.asarray(prompts, float)),
                            n_select=n_select)


def _brute_force_top_n(keys, f_v, n):
    scores = [float(np.dot(k, f_v) / (np.linalg.norm(k) * np.linalg.norm(f_v)))
              for k in keys]
    order = sorted(range(len(keys)), key=lambda i: (-scores[i], i))
    return order[:n]


def test_init_shapes_and_determinism():
    r1 = init_repository(20, l=4, d=8, n_select=2, seed=3)
    r2 = init_repository(20, l=4, d=8, n_select=2, seed=3)
    assert r1.keys.shape == (20, 8)
    assert r1.prompts.shape == (20, 4, 8)
    assert np.array_equal(r1.keys.data, r2.keys.data)
    assert np.array_equal(r1.prompts.data, r2.prompts.data)
    assert not np.array_equal(r1.keys.data, init_repository(20, 4, 8, seed=4).keys.data)


def test_init_validation():
    with pytest.raises(ConfigError):
        init_repository(1, 4, 8)
    with pytest.raises(ConfigError):
        init_repository(4, 0, 8)
    with pytest.raises(ConfigError):
        init_repository(4, 4, 8, n_select=5)
    with pytest.raises(ConfigError):
        init_repository(4, 4, 8, n_select=0)


def test_opposed_keys_pick_the_aligned_one():
    f_v = np.array([1.0, 2.0, -1.0])
    repo = _repo_from([f_v, -f_v], np.zeros((2, 2, 3)), n_select=1)
    res = retrieve(repo, nc.constant(f_v))
    assert list(res.indices) == [0]
    assert abs(res.scores.data[0] - 1.0) < 1e-12


def test_retrieval_matches_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(50):
        m, d, n = int(rng.integers(2, 9)), int(rng.integers(2, 6)), 0
        n = int(rng.integers(1, m + 1))
        keys = rng.normal(size=(m, d))
        f_v = rng.normal(size=d)
        repo = _repo_from(keys, rng.normal(size=(m, 3, d)), n_select=n)
        res = retrieve(repo, nc.constant(f_v))
        assert list(res.indices) == _brute_force_top_n(keys, f_v, n)
        assert np.all(np.diff(res.scores.data) <= 0)  # descending


def test_duplicate_keys_tie_break_by_lower_index():
    k = np.array([0.3, -0.7])
    keys = np.stack([-k, k, k, k])  # indices 1,2,3 tie at score 1
    repo = _repo_from(keys, np.zeros((4, 2, 2)), n_select=2)
    res = retrieve(repo, nc.constant(k))
    assert list(res.indices) == [1, 2]


def test_retrieve_scale_invariant_in_query():
    rng = np.random.default_rng(5)
    keys = rng.normal(size=(6, 4))
    repo = _repo_from(keys, rng.normal(size=(6, 2, 4)), n_select=3)
    f_v = rng.normal(size=4)
    a = retrieve(repo, nc.constant(f_v))
    b = retrieve(repo, nc.constant(317.0 * f_v))
    assert list(a.indices) == list(b.indices)
    assert np.max(np.abs(a.scores.data - b.scores.data)) < 1e-12
    assert np.max(np.abs(a.f_ret.data - b.f_ret.data)) < 1e-12


def test_zero_norm_inputs_rejected():
    repo = _repo_from(np.eye(3), np.zeros((3, 1, 3)), n_select=1)
    with pytest.raises(DegenerateInputError):
        retrieve(repo, nc.constant(np.zeros(3)))
    repo_bad = _repo_from(np.zeros((2, 3)), np.zeros((2, 1, 3)), n_select=1)
    with pytest.raises(DegenerateInputError):
        retrieve(repo_bad, nc.constant(np.ones(3)))


# -- aggregate -------------------------------------------------------------


def test_aggregate_single_prompt_single_row_is_identity():
    p = np.array([[[2.0, -1.0, 0.5]]])  # (1,1,3)
    out = aggregate(nc.constant(p))
    assert np.array_equal(out.data, p[0, 0])


def test_aggregate_opposite_prompts_cancel():
    p = np.stack([np.ones((4, 3)), -np.ones((4, 3))])
    assert np.array_equal(aggregate(nc.constant(p)).data, np.zeros(3))


def test_aggregate_matches_direct_mean():
    rng = np.random.default_rng(7)
    p = rng.normal(size=(2, 4, 5))
    out = aggregate(nc.constant(p)).data
    assert np.max(np.abs(out - p.mean(axis=(0, 1)))) < 1e-12


def test_aggregate_empty_rejected():
    with pytest.raises(ShapeError):
        aggregate(nc.constant(np.zeros((0, 2, 3))))
    with pytest.raises(ShapeError):
        aggregate(nc.constant(np.zeros((2, 3))))


def test_equal_scores_reduce_retrieve_to_plain_mean():
    # all keys identical -> uniform weights -> f_ret = aggregate default
    rng = np.random.default_rng(8)
    key = rng.normal(size=4)
    prompts = rng.normal(size=(3, 2, 4))
    repo = _repo_from(np.stack([key] * 3), prompts, n_select=3)
    res = retrieve(repo, nc.constant(rng.normal(size=4)))
    direct = aggregate(nc.constant(prompts)).data
    assert np.max(np.abs(res.f_ret.data - direct)) < 1e-12


# -- gradient flow ----------------------------------------------------------


def test_selected_keys_get_gradient_unselected_prompts_do_not():
    rng = np.random.default_rng(9)
    repo = init_repository(5, l=2, d=4, n_select=2, seed=1)
    f_v = nc.constant(rng.normal(size=4))
    res = retrieve(repo, f_v)
    target = nc.constant(rng.normal(size=4))
    diff = res.f_ret - target
    nc.backward(nc.matmul(diff, diff))
    sel = set(res.indices.tolist())
    for i in range(5):
        key_g = np.abs(repo.keys.grad[i]).max()
        prompt_g = np.abs(repo.prompts.grad[i]).max()
        if i in sel:
            assert key_g > 0.0
            assert prompt_g > 0.0
        else:
            assert key_g == 0.0
            assert prompt_g == 0.0


def test_retrieval_gradients_match_finite_differences():
    rng = np.random.default_rng(10)
    f_v_data = rng.normal(size=4)
    target = rng.normal(size=4)
    repo = init_repository(4, l=2, d=4, n_select=2, seed=2)

    def loss_value():
        res = retrieve(repo, nc.constant(f_v_data))
        d = res.f_ret - nc.constant(target)
        return nc.matmul(d, d)

    nc.backward(loss_value())
    for p in (repo.keys, repo.prompts):
        num = nc.fd_gradient(lambda: loss_value().item(), p.data, h=1e-5)
        assert nc.max_rel_error(p.grad, num) < 1e-4


def test_top_n_indices_tie_rule():
    assert list(top_n_indices(np.array([0.5, 0.9, 0.9, 0.1]), 3)) == [1, 2, 0]
