import math

import numpy as np
import pytest

from bapm.losses import combine, cross_entropy, dice_loss, l1_loss, one_hot, pretext_loss
from bapm.tensor import Tape, Tensor, precision


def test_l1_identical_zero(rng):
    x = rng.uniform(0, 1, (2, 1, 4, 4, 4))
    assert l1_loss(x, Tensor(x)).item() == 0.0


def test_l1_hand():
    assert l1_loss(np.zeros((1, 1, 2, 1, 1)), Tensor(np.array([1.0, -3.0]).reshape(1, 1, 2, 1, 1))).item() == 2.0


def test_dice_perfect(rng):
    target = one_hot(rng.integers(0, 4, (2, 6, 6, 6)))
    assert dice_loss(Tensor(target), target).item() == pytest.approx(-1.0, abs=1e-4)


def test_dice_absent_class_counts_as_perfect():
    target = one_hot(np.zeros((1, 3, 3, 3), int))
    assert dice_loss(Tensor(target), target).item() == pytest.approx(-1.0, abs=1e-6)


def test_dice_disjoint():
    t = one_hot(np.zeros((1, 2, 2, 2), int), 2)
    p = one_hot(np.ones((1, 2, 2, 2), int), 2)
    # each class: eps / (8 + eps)
    assert dice_loss(Tensor(p), t).item() == pytest.approx(-1e-5 / (8 + 1e-5), rel=1e-3)


def test_cross_entropy_uniform():
    logits = Tensor(np.zeros((5, 2)))
    assert cross_entropy(logits, [0, 1, 1, 0, 1]).item() == pytest.approx(math.log(2), abs=1e-6)


def test_cross_entropy_bad_label():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 2))), [0, 2])


def test_pretext_sum_additive(rng, f64):
    x = rng.uniform(0, 1, (2, 1, 4, 4, 4))
    rec = Tensor(rng.uniform(0, 1, x.shape), requires_grad=True)
    seg = Tensor(rng.dirichlet(np.ones(4), (2, 4, 4, 4)).transpose(0, 4, 1, 2, 3), requires_grad=True)
    target = one_hot(rng.integers(0, 4, (2, 4, 4, 4)))
    with Tape() as tape:
        total, report = pretext_loss(rec, x, seg, target)
        tape.backward(total)
    assert abs(report.l_total - (report.l_rec + report.l_seg)) <= 1e-6
    # gradients of the sum are the gradients of the parts
    np.testing.assert_allclose(rec.grad, np.sign(rec.data - x) / x.size)


@pytest.mark.parametrize("tasks", ["rec_only", "seg_only"])
def test_single_task_reports_none(tasks, rng):
    x = rng.uniform(0, 1, (1, 1, 2, 2, 2))
    seg = Tensor(np.full((1, 4, 2, 2, 2), 0.25))
    _, report = pretext_loss(Tensor(x), x, seg, one_hot(np.zeros((1, 2, 2, 2), int)), tasks)
    assert (report.l_rec is None) == (tasks == "seg_only")
    assert (report.l_seg is None) == (tasks == "rec_only")


def test_combine():
    assert combine(0.5, -0.25) == 0.25 and combine(None, 0.1) == 0.1 and math.isnan(combine(None, None))
