"""
Metric-aware embedding regularization.

The teacher-forced HR probabilities (a SoftGrid) go through a frozen linear
image embedder and a small trainable projection head to a 2-D point z.
Inside each batch every point's quality score is estimated from its
neighbours by leave-one-out Nadaraya-Watson regression with a Gaussian
kernel whose bandwidth is the median pairwise distance. The MSE between
those estimates and the oracle scores is the regularizer; its gradient
reaches the generator through z only (targets and bandwidth are constants).
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from torch.nn import functional as F

from App.core.errors import BatchTooSmallError, ShapeMismatchError
from App.models.schemas import IMAGE_VOCAB_SIZE, PromptSpec
from App.services.shapes import expect_shape
from App.services.synthdata import oracle_score, preference_score

N_HR = 64
SOFT_DIM = N_HR * IMAGE_VOCAB_SIZE


@dataclass
class MetricBatch:
    e_I: torch.Tensor
    z: torch.Tensor
    y: torch.Tensor
    y_hat: torch.Tensor
    h: float
    W: torch.Tensor
    loss: torch.Tensor


class ImageEmbedder(nn.Module):
    """Frozen e_I = F . flatten(soft) with F ~ N(0, 1/512) drawn from a recorded seed."""

    def __init__(self, embed_dim: int, seed: int):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        weight = torch.randn(embed_dim, SOFT_DIM, generator=g, dtype=torch.float64) / np.sqrt(SOFT_DIM)
        self.weight = nn.Parameter(weight.to(torch.get_default_dtype()), requires_grad=False)
        self.seed = seed

    def forward(self, soft: torch.Tensor) -> torch.Tensor:
        expect_shape("soft", soft, (None, N_HR, IMAGE_VOCAB_SIZE))
        return soft.flatten(1) @ self.weight.detach().t()


class ProjectionHead(nn.Module):
    """Two-layer perceptron embed_dim -> hidden (tanh) -> 2."""

    def __init__(self, embed_dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(embed_dim, hidden)
        self.fc2 = nn.Linear(hidden, 2)

    def forward(self, e_I: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.tanh(self.fc1(e_I)))


def adaptive_bandwidth(z: torch.Tensor, floor: float = 1e-3) -> float:
    """max(median pairwise Euclidean distance, floor); never differentiated."""
    expect_shape("z", z, (None, 2))
    n = z.size(0)
    if n < 2:
        raise BatchTooSmallError(f"adaptive_bandwidth needs at least 2 points, got {n}")
    z = z.detach().double()
    i, j = torch.triu_indices(n, n, offset=1)
    distances = (z[i] - z[j]).norm(dim=1)
    # mean of the two middle values for an even count
    return max(float(np.median(distances.numpy())), floor)


def kernel_regress(z: torch.Tensor, y: torch.Tensor, h: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Leave-one-out Nadaraya-Watson estimates.

    Args:
        z: (N, 2) points
        y: (N,) targets
        h: bandwidth

    Returns:
        (y_hat, W): (N,) estimates and the (N, N) kernel weights, zero on the diagonal
    """
    expect_shape("z", z, (None, 2))
    n = z.size(0)
    if n < 2:
        raise BatchTooSmallError(f"kernel regression needs at least 2 points, got {n}")
    expect_shape("y", y, (n,))
    sq_dist = (z[:, None, :] - z[None, :, :]).pow(2).sum(dim=-1)
    logits = -sq_dist / (2.0 * h * h)
    self_mask = torch.eye(n, dtype=torch.bool, device=z.device)
    W = torch.exp(logits).masked_fill(self_mask, 0.0)
    # normalized in log space so far-away rows cannot underflow to 0/0
    weights = F.softmax(logits.masked_fill(self_mask, float("-inf")), dim=1)
    y_hat = weights @ y.to(weights.dtype)
    return y_hat, W


def maer_loss(y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if y_hat.shape != y.shape:
        raise ShapeMismatchError(f"y_hat {tuple(y_hat.shape)} and y {tuple(y.shape)} differ in length")
    if y.numel() < 2:
        raise BatchTooSmallError(f"MAER loss needs N >= 2, got {y.numel()}")
    return (y_hat - y.detach()).pow(2).mean()


def hard_decode(soft: torch.Tensor) -> np.ndarray:
    """Argmax per position, lowest token id on ties."""
    return soft.detach().argmax(dim=-1).cpu().numpy()


def score_targets(soft: torch.Tensor, prompts: Sequence[PromptSpec], metric: str = "alignment") -> torch.Tensor:
    """Oracle scores of the hard decodes, returned as constants."""
    decoded = hard_decode(soft)
    if metric == "alignment":
        scores = [oracle_score(cells, prompt) for cells, prompt in zip(decoded, prompts)]
    else:
        scores = [preference_score(cells) for cells in decoded]
    return torch.tensor(scores, dtype=soft.dtype)


class MetricRegularizer(nn.Module):

    def __init__(self, embed_dim: int, hidden: int, seed: int, bandwidth_floor: float = 1e-3):
        super().__init__()
        self.embedder = ImageEmbedder(embed_dim, seed)
        self.head = ProjectionHead(embed_dim, hidden)
        self.bandwidth_floor = bandwidth_floor

    def embed_image(self, soft: torch.Tensor) -> torch.Tensor:
        return self.embedder(soft)

    def project(self, e_I: torch.Tensor) -> torch.Tensor:
        return self.head(e_I)

    def forward(
        self,
        hr_logits: torch.Tensor,
        prompts: Sequence[PromptSpec],
        metric: str = "alignment",
        y: Optional[torch.Tensor] = None,
        h: Optional[float] = None,
    ) -> MetricBatch:
        """
        Full regularizer on a batch of HR logits. y and h may be pinned by
        the caller (gradient checking holds them fixed under perturbation).
        """
        soft = F.softmax(hr_logits, dim=-1)
        e_I = self.embed_image(soft)
        z = self.project(e_I)
        if y is None:
            y = score_targets(soft, prompts, metric)
        if h is None:
            h = adaptive_bandwidth(z, self.bandwidth_floor)
        y_hat, W = kernel_regress(z, y, h)
        return MetricBatch(e_I=e_I, z=z, y=y, y_hat=y_hat, h=h, W=W, loss=maer_loss(y_hat, y))
