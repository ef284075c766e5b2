import math

import pytest
import torch
from torch.nn import functional as F

from App.core.errors import BatchTooSmallError, ShapeMismatchError
from App.models.schemas import Interpretation
from App.services.maer import (
    ImageEmbedder,
    adaptive_bandwidth,
    kernel_regress,
    maer_loss,
    score_targets,
)
from App.services.synthdata import make_prompt, render_scene
from App.services.vocabulary import vocabulary


def _z(*points):
    return torch.tensor(points, dtype=torch.float64)


def test_bandwidth_is_median_distance():
    assert adaptive_bandwidth(_z([0, 0], [1, 0], [2, 0])) == pytest.approx(1.0)
    # distances 1, 3, 4, 2, 3, 1 -> median of the middle pair (2, 3)
    assert adaptive_bandwidth(_z([0, 0], [1, 0], [3, 0], [4, 0])) == pytest.approx(2.5)


def test_bandwidth_floor_and_minimum_batch():
    assert adaptive_bandwidth(_z([1, 1], [1, 1], [1, 1])) == 1e-3
    with pytest.raises(BatchTooSmallError):
        adaptive_bandwidth(_z([0, 0]))


def test_kernel_regression_leaves_one_out():
    z = _z([0, 0], [1, 0], [5, 5])
    y = torch.tensor([0.1, 0.9, 0.4], dtype=torch.float64)
    y_hat, W = kernel_regress(z, y, 1.0)
    assert torch.count_nonzero(torch.diagonal(W)) == 0
    assert float(W[0, 1]) == pytest.approx(math.exp(-0.5))
    expected = (W * y).sum(dim=1) / W.sum(dim=1)
    torch.testing.assert_close(y_hat, expected)
    assert bool(((y_hat >= y.min()) & (y_hat <= y.max())).all())


def test_kernel_regression_two_points_swap():
    y_hat, _ = kernel_regress(_z([0, 0], [1, 1]), torch.tensor([0.2, 0.7], dtype=torch.float64), 0.5)
    torch.testing.assert_close(y_hat, torch.tensor([0.7, 0.2], dtype=torch.float64))


def test_kernel_regression_stays_finite_when_points_are_far_apart():
    y_hat, _ = kernel_regress(_z([0, 0], [1000, 0], [2000, 0]), torch.tensor([0.0, 0.5, 1.0], dtype=torch.float64), 1e-3)
    assert bool(torch.isfinite(y_hat).all())


def test_constant_targets_give_zero_loss():
    z = torch.randn(6, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    y = torch.full((6,), 0.75, dtype=torch.float64)
    y_hat, _ = kernel_regress(z, y, adaptive_bandwidth(z))
    assert float(maer_loss(y_hat, y)) == pytest.approx(0.0, abs=1e-15)


def test_maer_loss_checks_lengths():
    with pytest.raises(ShapeMismatchError):
        maer_loss(torch.zeros(3), torch.zeros(4))
    with pytest.raises(BatchTooSmallError):
        maer_loss(torch.zeros(1), torch.zeros(1))


def test_maer_loss_stops_target_gradient():
    y_hat = torch.tensor([0.2, 0.4], requires_grad=True)
    y = torch.tensor([0.0, 1.0], requires_grad=True)
    maer_loss(y_hat, y).backward()
    assert y.grad is None
    torch.testing.assert_close(y_hat.grad, torch.tensor([0.2, -0.6]))


def test_image_embedder_is_frozen_and_seeded():
    a, b = ImageEmbedder(64, seed=5), ImageEmbedder(64, seed=5)
    assert torch.equal(a.weight, b.weight)
    assert not a.weight.requires_grad
    assert float(a.weight.double().var()) == pytest.approx(1 / 512, rel=0.05)


def test_score_targets_of_exact_renderings():
    prompt = make_prompt(vocabulary.encode_prompt("cool", "checker"))
    cells = torch.tensor(render_scene(Interpretation(color=4, pattern="checker")).cells)
    soft = F.one_hot(cells, 8).double()[None]
    assert score_targets(soft, [prompt]).tolist() == [1.0]
    assert score_targets(soft, [prompt], metric="preference").tolist() == [1.0]


def test_regularizer_gradient_reaches_generator_only_through_z(jittered, batch):
    out = jittered(batch.prompt_tokens, batch.x_lr, batch.x_hr, c=jittered.mean_latent(batch.prompt_tokens))
    metric = jittered.maer(out.hr_logits, batch.prompts)
    assert not metric.y.requires_grad
    assert metric.z.shape == (len(batch), 2)
    metric.loss.backward()
    assert jittered.maer.embedder.weight.grad is None
    assert jittered.maer.head.fc1.weight.grad is not None
    assert jittered.backbone.hr_stage.head.weight.grad is not None


def _double_loop(z, y, h):
    n = len(y)
    out = []
    for i in range(n):
        num = den = 0.0
        for j in range(n):
            if i != j:
                w = math.exp(-float(((z[i] - z[j]) ** 2).sum()) / (2 * h * h))
                num += w * float(y[j])
                den += w
        out.append(num / den)
    return torch.tensor(out, dtype=torch.float64)


@pytest.mark.parametrize("n", [2, 3, 7, 16, 33])
def test_kernel_regression_invariants(n):
    g = torch.Generator().manual_seed(n)
    z = torch.randn(n, 2, generator=g, dtype=torch.float64)
    y = torch.rand(n, generator=g, dtype=torch.float64)
    h = adaptive_bandwidth(z)
    y_hat, _ = kernel_regress(z, y, h)
    torch.testing.assert_close(y_hat, _double_loop(z, y, h), rtol=0, atol=1e-12)
    shifted, _ = kernel_regress(z + torch.tensor([3.0, -7.0], dtype=torch.float64), y, h)
    torch.testing.assert_close(shifted, y_hat, rtol=0, atol=1e-12)
    scaled, _ = kernel_regress(4.0 * z, y, 4.0 * h)
    torch.testing.assert_close(scaled, y_hat, rtol=0, atol=1e-12)
    assert adaptive_bandwidth(4.0 * z) == pytest.approx(4.0 * h)


def test_gradient_pulls_a_point_toward_neighbours_with_similar_scores():
    """A y=1 point between a y=0 and a y=1 cluster is pushed toward the y=1 side."""
    z = torch.tensor([[-2.0, -0.5], [-2.0, 0.0], [-2.0, 0.5],
                      [2.0, -0.5], [2.0, 0.0], [2.0, 0.5],
                      [0.0, 0.0]], dtype=torch.float64, requires_grad=True)
    y = torch.tensor([0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0], dtype=torch.float64)
    y_hat, _ = kernel_regress(z, y, 2.0)
    maer_loss(y_hat, y).backward()
    assert -float(z.grad[6, 0]) > 0.0
    assert abs(float(z.grad[6, 1])) < 1e-12
