import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import tiny_config
from dpat.errors import ConfigurationError, DegenerateInputError, SelectionError
from dpat.model import DPATModel
from dpat.prompts import (
    TaskKeyBank, cosine_distance, distances, dualprompt_match_loss, match_loss, match_loss_from_distances,
    select_task,
)


def test_two_key_example_matches_scalar_evaluation():
    # t=2, distances (0.2, 0.4), tau=0.1: -log(e^-4 / (e^-2 + e^-4)) = log(1 + e^2)
    d = torch.tensor([0.2, 0.4], dtype=torch.float64)
    expected = math.log(1 + math.exp(2.0))
    assert abs(float(match_loss_from_distances(d, 2, 0.1)) - expected) < 1e-12
    assert abs(float(match_loss_from_distances(d, 2, 0.1)) - oracles.match_loss_scalar([0.2, 0.4], 2, 0.1)) < 1e-12


def test_single_task_loss_is_exactly_zero():
    q = torch.randn(5, 8, dtype=torch.float64)
    keys = torch.randn(1, 8, dtype=torch.float64)
    assert torch.equal(match_loss(q, keys, 1, 0.1), torch.zeros(5, dtype=torch.float64))


@pytest.mark.parametrize("t", [2, 3, 7])
def test_uniform_distances_give_log_t(t):
    d = torch.full((t,), 0.37, dtype=torch.float64)
    assert abs(float(match_loss_from_distances(d, t, 0.1)) - math.log(t)) < 1e-12


def test_only_keys_up_to_t_enter_the_normaliser():
    d = torch.tensor([0.1, 0.5, 0.0, 0.0], dtype=torch.float64)
    assert float(match_loss_from_distances(d, 2, 0.2)) == pytest.approx(oracles.match_loss_scalar([0.1, 0.5], 2, 0.2), abs=1e-12)


def test_match_loss_from_vectors_matches_oracle(rng):
    keys = rng.normal(size=(4, 6))
    q = rng.normal(size=6)
    d = [oracles.cosine_distance(q, k) for k in keys]
    got = float(match_loss(torch.from_numpy(q), torch.from_numpy(keys), 3, 0.1))
    assert got == pytest.approx(oracles.match_loss_scalar(d, 3, 0.1), abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(0.0, 2.0, allow_nan=False), min_size=1, max_size=12),
    st.floats(0.01, 5.0),
    st.data(),
)
def test_match_loss_is_nonnegative_and_matches_lse(ds, tau, data):
    t = data.draw(st.integers(1, len(ds)))
    got = float(match_loss_from_distances(torch.tensor(ds, dtype=torch.float64), t, tau))
    assert got >= -1e-12
    assert got == pytest.approx(oracles.match_loss_scalar(ds, t, tau), abs=1e-10)


def test_bad_temperature_and_task():
    keys = torch.randn(2, 4)
    with pytest.raises(ConfigurationError):
        match_loss(torch.randn(4), keys, 1, 0.0)
    with pytest.raises(SelectionError):
        match_loss(torch.randn(4), keys, 3, 0.1)
    with pytest.raises(ConfigurationError):
        TaskKeyBank(4, tau=-1.0)


def test_cosine_distance_range_and_zero_norm():
    q = torch.tensor([1.0, 0.0])
    assert float(cosine_distance(q, q)) == pytest.approx(0.0)
    assert float(cosine_distance(q, -q)) == pytest.approx(2.0)
    with pytest.raises(DegenerateInputError):
        cosine_distance(q, torch.zeros(2))


def test_dualprompt_loss_is_raw_distance(rng):
    q, k = rng.normal(size=(3, 5)), rng.normal(size=5)
    got = dualprompt_match_loss(torch.from_numpy(q), torch.from_numpy(k)).numpy()
    np.testing.assert_allclose(got, [oracles.cosine_distance(x, k) for x in q], atol=1e-12)


def test_select_task_matches_brute_force_scan(rng):
    for _ in range(100):
        n = int(rng.integers(1, 9))
        keys = rng.normal(size=(n, 6))
        q = rng.normal(size=6)
        assert int(select_task(torch.from_numpy(q), torch.from_numpy(keys))) == oracles.brute_force_select(q, keys)


def test_select_task_ties_go_to_lowest_index():
    k = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
    assert int(select_task(torch.tensor([1.0, 0.0], dtype=torch.float64), k)) == 1
    assert int(select_task(torch.tensor([0.0, 3.0], dtype=torch.float64), k)) == 2


def test_select_task_on_empty_bank():
    with pytest.raises(SelectionError):
        select_task(torch.randn(3), torch.zeros(0, 3))


def test_distance_matrix_shape():
    assert distances(torch.randn(5, 4), torch.randn(3, 4)).shape == (5, 3)


# ---- prompt placement ---------------------------------------------------------------


def test_prompt_rows_are_twice_the_configured_length():
    cfg = tiny_config()
    model = DPATModel(cfg)
    model.add_task(2)
    assert model.prompts.g_T["1"].shape == (2 * cfg.prompts.agnostic_length, 8)
    assert model.prompts.e_S["1_2"].shape == (2 * cfg.prompts.specific_length, 8)


def test_agnostic_prompts_shared_and_specific_prompts_per_task():
    model = DPATModel(tiny_config())
    model.add_task(2)
    model.add_task(2)
    g1, g2 = model.block_prompts(1, 1), model.block_prompts(1, 2)
    assert g1[0] is g2[0] and g1[1] is g2[1]
    e1, e2 = model.block_prompts(2, 1), model.block_prompts(2, 2)
    assert e1[0] is not e2[0]
    assert model.block_prompts(2, None) is None


def test_prompts_exist_only_for_seen_tasks():
    model = DPATModel(tiny_config())
    model.add_task(2)
    with pytest.raises(SelectionError):
        model.block_prompts(2, 2)
    with pytest.raises(SelectionError):
        model.block_prompts(3, 1)


def test_ablated_prefixes_are_not_assembled():
    m = DPATModel(tiny_config(ablate="agnostic-prefix"))
    m.add_task(2)
    assert m.block_prompts(1, 1) is None and m.block_prompts(2, 1) is not None
    m = DPATModel(tiny_config(ablate="all-prefixes"))
    m.add_task(2)
    assert m.block_prompts(1, 1) is None and m.block_prompts(2, 1) is None


def test_new_keys_are_unit_norm():
    bank = TaskKeyBank(16)
    g = torch.Generator().manual_seed(0)
    for _ in range(3):
        bank.add_key(g)
    assert torch.allclose(bank.matrix().norm(dim=1), torch.ones(3))
    assert bank.matrix(2).shape == (2, 16)


def test_default_placement_on_a_six_block_model():
    from dpat.prompts import PromptSet

    cfg = tiny_config()
    cfg.prompts.agnostic_layers, cfg.prompts.specific_layers = [1, 2], [3, 5]
    ps = PromptSet(cfg.prompts, blocks=6, dim=8)
    for _ in range(3):
        ps.add_task()
    assert ps.assemble(1, 2)[0] is ps.g_T["1"]
    assert ps.assemble(4, 3)[1] is ps.e_S["3_4"]
    assert ps.assemble(6, 3) is None


# ---- query function ------------------------------------------------------------------


def _queries(model, x):
    from dpat.prompts import query_fn

    return query_fn(torch.from_numpy(x), model.backbone)


def test_query_is_deterministic_and_untouched_by_training():
    from dpat.trainer import train_task

    cfg = tiny_config()
    model = DPATModel(cfg)
    x = np.random.default_rng(0).random((4, 2, 8, 8, 1))
    before = _queries(model, x)
    assert torch.equal(before, _queries(model, x)) and not before.requires_grad
    train_task(model, x, np.array([0, 1, 0, 1]), [0, 1], cfg)
    assert torch.equal(before, _queries(model, x))


def test_single_frame_query_equals_frame_feature():
    cfg = tiny_config()
    cfg.model.frames = 1
    model = DPATModel(cfg.validate())
    frame = np.random.default_rng(1).random((8, 8, 1))
    q = _queries(model, frame[None, None])
    q2 = _queries(model, np.stack([frame, frame])[None])  # time-averaging identical frames is a no-op
    assert torch.allclose(q, q2, atol=1e-14)


# ---- loss and selection invariants -------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.floats(0.05, 2.0))
def test_loss_is_negative_log_softmax_probability(seed, t, tau):
    d = torch.from_numpy(np.random.default_rng(seed).uniform(0, 2, size=t))
    p = torch.softmax(-d / tau, dim=0)[t - 1]
    assert math.exp(-float(match_loss_from_distances(d, t, tau))) == pytest.approx(float(p), rel=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.floats(0.1, 10.0))
def test_loss_invariant_to_scaling_distance_and_temperature_together(seed, t, c):
    d = torch.from_numpy(np.random.default_rng(seed).uniform(0, 2, size=t))
    a = float(match_loss_from_distances(d, t, 0.1))
    b = float(match_loss_from_distances(c * d, t, c * 0.1))
    assert a == pytest.approx(b, abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_selection_invariant_to_query_scale(seed, c):
    g = np.random.default_rng(seed)
    q, keys = torch.from_numpy(g.normal(size=(5, 8))), torch.from_numpy(g.normal(size=(4, 8)))
    assert torch.equal(select_task(q, keys), select_task(c * q, keys))


def test_dualprompt_distance_endpoints():
    k = torch.tensor([0.0, 3.0, 0.0], dtype=torch.float64)
    assert float(dualprompt_match_loss(torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64), k)) == pytest.approx(0.0, abs=1e-15)
    assert float(dualprompt_match_loss(torch.tensor([2.0, 0.0, 0.0], dtype=torch.float64), k)) == pytest.approx(1.0, abs=1e-15)
