import logging
from typing import Callable, Dict, Optional

import torch

from App.core.config import TrainConfig
from App.models.schemas import GradCheckEntry, GradCheckReport
from App.services.generator import MarMaerModel, build_model
from App.services.trainer import COMPONENTS, TrainingBatch, latent_noise, pin_targets, total_loss

logger = logging.getLogger(__name__)

TINY_CONFIG = dict(d_model=16, n_layers=1, n_heads=2, ff_width=32, batch_size=4, dtype="float64")


@torch.no_grad()
def jitter_parameters(model: MarMaerModel, scale: float = 0.1, seed: int = 0) -> MarMaerModel:
    """
    Add seeded Gaussian noise to every trainable parameter so zero-initialized
    readouts and FiLM maps stop hiding gradient paths.
    """
    g = torch.Generator().manual_seed(seed)
    for p in model.trainable_parameters():
        noise = torch.randn(p.shape, generator=g, dtype=torch.float64)
        p.add_(scale * noise.to(p.dtype))
    return model


def _relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-8) -> float:
    """Largest deviation over the checked entries of one group, relative to the group's largest gradient."""
    scale = max(float(analytic.abs().max()), float(numeric.abs().max()), floor)
    return float((analytic - numeric).abs().max()) / scale


def grad_check(config: TrainConfig, batch: TrainingBatch, tolerance: float = 1e-4, kl_tolerance: float = 1e-6,
               step: float = 1e-5, max_entries: int = 8, seed: int = 0,
               model: Optional[MarMaerModel] = None) -> GradCheckReport:
    """
    Compare autograd gradients with central finite differences.

    Every loss component is checked against every parameter. For each
    trainable parameter the max_entries entries with the largest analytic
    gradient are differenced. MAER targets, bandwidth and latent noise are
    held fixed so the differenced function is the one autograd sees.
    Frozen parameters must have an exactly zero analytic gradient.

    Args:
        config: run configuration; it is switched to float64
        batch: batch to evaluate the losses on
        tolerance: max relative error for L_AR, L_MAER and L_total
        kl_tolerance: max relative error for L_KL
        step: finite-difference step
        max_entries: entries checked per parameter
        seed: seed of the parameter jitter and latent noise
        model: check this model instead of a freshly built, jittered one

    Returns:
        GradCheckReport: one entry per (loss, parameter)
    """
    config = config.model_copy(update={"dtype": "float64"})
    if model is None:
        model = jitter_parameters(build_model(config), seed=seed)
    eps = latent_noise(config, len(batch), seed)
    pinned = pin_targets(model, batch, eps)

    def evaluate(name: str) -> torch.Tensor:
        return total_loss(model, batch, eps, pinned).components[name]

    entries = []
    for loss_name in COMPONENTS:
        entries.extend(_check_loss(model, loss_name, evaluate, kl_tolerance if loss_name == "L_KL" else tolerance,
                                   step, max_entries))
    report = GradCheckReport(entries=entries)
    for loss_name in COMPONENTS:
        logger.info("grad_check %s: max relative error %.3e", loss_name, report.max_error(loss_name))
    return report


def _check_loss(model: MarMaerModel, loss_name: str, evaluate: Callable[[str], torch.Tensor], tolerance: float,
                step: float, max_entries: int) -> list:
    model.zero_grad(set_to_none=True)
    loss = evaluate(loss_name)
    if loss.requires_grad:
        loss.backward()
    analytic: Dict[str, torch.Tensor] = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
    model.zero_grad(set_to_none=True)

    entries = []
    for name, p in model.named_parameters():
        grad = analytic[name]
        if not p.requires_grad:
            worst = float(grad.abs().max()) if grad.numel() else 0.0
            entries.append(GradCheckEntry(loss=loss_name, parameter=name, frozen=True, max_rel_error=worst,
                                          checked_entries=grad.numel(), tolerance=0.0, passed=worst == 0.0))
            continue

        flat_grad = grad.reshape(-1)
        k = min(max_entries, flat_grad.numel())
        indices = flat_grad.abs().topk(k).indices
        flat = p.data.view(-1)
        numeric = torch.zeros(k, dtype=torch.float64)
        with torch.no_grad():
            for n, index in enumerate(indices.tolist()):
                original = flat[index].item()
                flat[index] = original + step
                plus = evaluate(loss_name).item()
                flat[index] = original - step
                minus = evaluate(loss_name).item()
                flat[index] = original
                numeric[n] = (plus - minus) / (2.0 * step)
        worst = _relative_error(flat_grad[indices].double(), numeric) if k else 0.0
        entries.append(GradCheckEntry(loss=loss_name, parameter=name, frozen=False, max_rel_error=worst,
                                      checked_entries=k, tolerance=tolerance, passed=worst <= tolerance))
    return entries
