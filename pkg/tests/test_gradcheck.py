import numpy as np
import pytest

from hairsynth import gradcheck as G
from hairsynth import tensor as T
from hairsynth.tensor import Tensor


def test_numerical_grad_of_a_quadratic():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    g = G.numerical_grad(lambda: T.tsum(T.square(x)), x)
    np.testing.assert_allclose(g, [2.0, -4.0], rtol=1e-9)


def test_relative_error_is_zero_for_equal_arrays():
    assert G.relative_error(np.ones(3), np.ones(3)) == 0.0


def test_full_suite_passes_quickly():
    report = G.grad_check_suite()
    worst = max(report.results, key=lambda r: r.error)
    assert report.passed, [(r.name, r.seed, r.error) for r in report.failures()]
    assert worst.error <= 1e-4
    assert report.seconds < 60


def test_suite_covers_every_registered_op_and_loss():
    names = {r.name for r in G.grad_check_suite(seeds=[0]).results}
    for op in T.VJP:
        assert any(n.startswith(op) for n in names), op
    for loss in ("pixel_loss", "adv_loss", "style_loss", "fm_loss", "texture_loss", "gram"):
        assert any(n.startswith(loss) for n in names), loss


@pytest.mark.parametrize("op", ["square", "conv2d", "sigmoid"])
def test_corrupted_backward_rule_is_reported(op):
    with G.corrupted(op):
        report = G.grad_check_suite(seeds=[0], include_losses=False)
    failed = {r.name for r in report.failures()}
    assert not report.passed
    assert any(n.startswith(op) for n in failed)
    # the registry is restored afterwards
    assert G.grad_check_suite(seeds=[0], include_losses=False).passed
