import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from editable import autodiff as ad
from editable.autodiff import Tensor
from editable.constraints import (
    ConstraintError,
    EditConstraint,
    TargetSampler,
    is_satisfied,
    load_rank_histogram,
    margin_constraint,
    margin_from_scores,
    sample_edit,
)
from editable.data_io import Dataset

logit_vectors = arrays(np.float64, st.integers(2, 8), elements=st.floats(-20, 20))


@pytest.mark.parametrize(
    "logits, y_ref, expected",
    [([2.0, 1.0, 0.0], 0, -1.0), ([0.0, 3.0, 1.0], 2, 2.0), ([1.0, 1.0, 0.0], 0, 0.0)],
)
def test_margin_examples(logits, y_ref, expected):
    value = margin_constraint(Tensor(logits), y_ref).item()
    assert value == pytest.approx(expected, abs=1e-12)


def test_explicit_competitors_and_scores():
    logits = Tensor([0.0, 3.0, 1.0, 5.0])
    assert margin_constraint(logits, 2, [1]).item() == pytest.approx(2.0)
    # sequence-style edit: reference log-likelihood vs alternative translations
    ref = Tensor(-4.0)
    alts = Tensor([-6.5, -4.5, -9.0])
    assert margin_from_scores(ref, alts).item() == pytest.approx(-0.5)


def test_margin_errors():
    with pytest.raises(ConstraintError):
        margin_constraint(Tensor([1.0]), 0)
    with pytest.raises(ConstraintError):
        margin_constraint(Tensor([1.0, 2.0, 3.0]), 0, [0, 1])
    with pytest.raises(ConstraintError):
        EditConstraint(np.zeros(3), 1, competitors=())


def test_is_satisfied():
    assert is_satisfied(-0.5)
    assert is_satisfied(0.0)
    assert not is_satisfied(0.7)
    with pytest.raises(ConstraintError):
        is_satisfied(float("nan"))


@settings(max_examples=50, deadline=None)
@given(logit_vectors, st.floats(-100, 100), st.data())
def test_shift_invariance(z, shift, data):
    y = data.draw(st.integers(0, len(z) - 1))
    a = margin_constraint(Tensor(z), y).item()
    b = margin_constraint(Tensor(z + shift), y).item()
    assert abs(a - b) <= 1e-12 * max(1.0, abs(shift) + np.abs(z).max())


@settings(max_examples=50, deadline=None)
@given(logit_vectors)
def test_argmax_target_is_satisfied(z):
    top = int(np.argmax(z))
    assume(np.sum(z == z[top]) == 1)
    assert is_satisfied(margin_constraint(Tensor(z), top).item())


@settings(max_examples=50, deadline=None)
@given(logit_vectors, st.data())
def test_gradient_sums_to_zero(z, data):
    y = data.draw(st.integers(0, len(z) - 1))
    x = Tensor(z, requires_grad=True)
    (g,) = ad.grad(margin_constraint(x, y), [x])
    assert abs(g.data.sum()) < 1e-12


@pytest.fixture
def tiny_dataset():
    rng = np.random.default_rng(0)
    return Dataset(rng.normal(size=(30, 4)), np.arange(30) % 10, 10)


def test_uniform_sampler_reproducible(tiny_dataset):
    draws = [sample_edit(tiny_dataset, None, TargetSampler(seed=9)) for _ in range(1)]
    s1, s2 = TargetSampler(seed=9), TargetSampler(seed=9)
    a = [sample_edit(tiny_dataset, None, s1) for _ in range(20)]
    b = [sample_edit(tiny_dataset, None, s2) for _ in range(20)]
    assert [(c.y_ref, c.source) for c in a] == [(c.y_ref, c.source) for c in b]
    assert all(0 <= c.y_ref <= 9 for c in a)
    assert draws[0].y_ref == a[0].y_ref
    assert np.array_equal(a[3].x, tiny_dataset.features[a[3].source])


def test_rank_matched_with_all_mass_on_top(tiny_dataset):
    scores = np.random.default_rng(1).normal(size=(30, 10))
    sampler = TargetSampler("rank_matched", seed=2, histogram=[1.0, 0.0, 0.0])
    for _ in range(10):
        c = sample_edit(tiny_dataset, scores, sampler)
        assert c.y_ref == int(np.argmax(scores[c.source]))
    with pytest.raises(ConstraintError):
        sample_edit(tiny_dataset, None, sampler)


def test_rank_matched_follows_histogram(tiny_dataset):
    scores = np.tile(np.arange(10.0)[::-1], (30, 1))  # class r has rank r
    sampler = TargetSampler("rank_matched", seed=3, histogram=[0.0, 0.25, 0.75])
    ranks = [sample_edit(tiny_dataset, lambda x: scores[0], sampler).y_ref for _ in range(400)]
    assert set(ranks) <= {1, 2}
    assert abs(np.mean(np.array(ranks) == 2) - 0.75) < 0.07


def test_pool_round_robin(tiny_dataset):
    pool = [EditConstraint(np.zeros(4), i) for i in range(3)]
    sampler = TargetSampler("pool", pool=pool)
    assert [sample_edit(tiny_dataset, None, sampler).y_ref for _ in range(4)] == [0, 1, 2, 0]
    with pytest.raises(ConstraintError):
        TargetSampler("pool", pool=[])


def test_rank_histogram_file(tmp_path):
    path = tmp_path / "ranks.txt"
    path.write_text("0 0.5\n1 0.25\n# comment\n3 0.25\n")
    assert load_rank_histogram(path).tolist() == [0.5, 0.25, 0.0, 0.25]
    path.write_text("0 0.5\n1 0.2\n")
    with pytest.raises(ConstraintError):
        load_rank_histogram(path)
    path.write_text("0 0.5 9\n")
    with pytest.raises(ConstraintError):
        load_rank_histogram(path)
