import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from App.core.config import TrainConfig, settings
from App.core.errors import BatchTooSmallError, NonFiniteLossError, OutputPathError
from App.models.schemas import DatasetRecord, PromptSpec, StepReport
from App.services.ambiguity import kl_loss
from App.services.backbone import ar_loss
from App.services.generator import ForwardOutputs, MarMaerModel, build_model
from App.services.maer import MetricBatch
from App.services.synthdata import load_records, make_prompt

logger = logging.getLogger(__name__)

COMPONENTS = ("L_AR", "L_MAER", "L_KL", "L_total")


@dataclass
class TrainingBatch:
    prompt_tokens: torch.Tensor
    x_lr: torch.Tensor
    x_hr: torch.Tensor
    prompts: List[PromptSpec]

    def __len__(self) -> int:
        return self.prompt_tokens.size(0)


@dataclass
class PinnedTargets:
    """MAER targets and bandwidth held fixed, e.g. while finite-differencing."""
    y: torch.Tensor
    h: float


@dataclass
class LossBreakdown:
    total: torch.Tensor
    components: Dict[str, torch.Tensor]
    outputs: ForwardOutputs
    metric: Optional[MetricBatch] = None


def make_batch(records: Sequence[DatasetRecord]) -> TrainingBatch:
    return TrainingBatch(
        prompt_tokens=torch.tensor([r.prompt for r in records], dtype=torch.long),
        x_lr=torch.tensor([r.lr for r in records], dtype=torch.long),
        x_hr=torch.tensor([r.hr for r in records], dtype=torch.long),
        prompts=[make_prompt(r.prompt) for r in records],
    )


def latent_noise(config: TrainConfig, batch_size: int, step: int) -> torch.Tensor:
    """Standard-normal eps for one step, a pure function of (seed, step)."""
    g = torch.Generator().manual_seed(config.seed * 1_000_003 + step)
    eps = torch.randn(batch_size, config.latent_dim, generator=g, dtype=torch.float64)
    return eps.to(torch.float64 if config.dtype == "float64" else torch.float32)


def total_loss(model: MarMaerModel, batch: TrainingBatch, eps: Optional[torch.Tensor] = None,
               pinned: Optional[PinnedTargets] = None) -> LossBreakdown:
    """
    L_total = L_AR + lambda1 * L_MAER + lambda2 * L_KL. Components of
    disabled variants are reported as exact zeros and never enter the graph.
    """
    config = model.config
    if config.use_maer and len(batch) < 2:
        raise BatchTooSmallError(f"MAER needs a batch of at least 2 records, got {len(batch)}")

    out = model(batch.prompt_tokens, batch.x_lr, batch.x_hr, eps=eps)
    zero = out.lr_logits.new_zeros(())
    l_ar = ar_loss(out.lr_logits, out.hr_logits, batch.x_lr, batch.x_hr)
    total = l_ar

    metric = None
    l_maer = zero
    if config.use_maer:
        metric = model.maer(
            out.hr_logits, batch.prompts, config.target_metric,
            y=None if pinned is None else pinned.y,
            h=None if pinned is None else pinned.h,
        )
        l_maer = metric.loss
        total = total + config.lambda1 * l_maer

    l_kl = zero
    if config.use_ambiguity:
        l_kl = kl_loss(out.latent.mu, out.latent.log_var)
        total = total + config.lambda2 * l_kl

    components = {"L_AR": l_ar, "L_MAER": l_maer, "L_KL": l_kl, "L_total": total}
    return LossBreakdown(total=total, components=components, outputs=out, metric=metric)


def pin_targets(model: MarMaerModel, batch: TrainingBatch, eps: Optional[torch.Tensor] = None) -> Optional[PinnedTargets]:
    if not model.config.use_maer:
        return None
    with torch.no_grad():
        metric = total_loss(model, batch, eps).metric
    return PinnedTargets(y=metric.y, h=metric.h)


class Trainer:
    """
    Owns the model, the AdamW optimizer and the step counter. Batches and
    latent noise are pure functions of (seed, step), so a run restored from
    a checkpoint continues exactly as an uninterrupted one.
    """

    def __init__(self, config: TrainConfig, model: Optional[MarMaerModel] = None):
        torch.set_num_threads(settings.NUM_THREADS)
        self.config = config
        self.model = model if model is not None else build_model(config)
        self.optimizer = torch.optim.AdamW(
            self.model.trainable_parameters(),
            lr=config.learning_rate,
            betas=(config.beta1, config.beta2),
            eps=config.eps,
            weight_decay=config.weight_decay,
        )
        self.step = 0

    def batch_indices(self, n_records: int, step: int) -> np.ndarray:
        """Indices of the step's batch in an endless stream of seeded epoch permutations."""
        positions = np.arange(step * self.config.batch_size, (step + 1) * self.config.batch_size)
        epochs = positions // n_records
        indices = np.empty_like(positions)
        for epoch in np.unique(epochs):
            perm = np.random.default_rng([self.config.seed, int(epoch)]).permutation(n_records)
            sel = epochs == epoch
            indices[sel] = perm[positions[sel] % n_records]
        return indices

    def train_step(self, batch: TrainingBatch) -> StepReport:
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        eps = latent_noise(self.config, len(batch), self.step)
        losses = total_loss(self.model, batch, eps)

        values = {name: float(t.detach()) for name, t in losses.components.items()}
        for name in COMPONENTS:
            if not math.isfinite(values[name]):
                raise NonFiniteLossError(name, self.step, values[name])

        losses.total.backward()
        grads = [p.grad.detach().double().pow(2).sum() for p in self.model.trainable_parameters() if p.grad is not None]
        grad_norm = float(torch.stack(grads).sum().sqrt()) if grads else 0.0
        self.optimizer.step()

        report = StepReport(
            step=self.step,
            grad_norm=grad_norm,
            realized_KL=self.config.lambda2 * values["L_KL"],
            **values,
        )
        self.step += 1
        return report


@dataclass
class TrainResult:
    trainer: Trainer
    reports: List[StepReport] = field(default_factory=list)

    @property
    def model(self) -> MarMaerModel:
        return self.trainer.model


def _metrics_line(report: StepReport) -> str:
    return json.dumps(report.model_dump(), sort_keys=True, separators=(",", ":"))


def train(config: TrainConfig, dataset: Union[str, Path, Sequence[DatasetRecord]],
          metrics_path: Optional[Union[str, Path]] = None, trainer: Optional[Trainer] = None) -> TrainResult:
    """
    Run config.steps optimizer steps over seeded shuffles of the dataset.

    Args:
        config: run configuration
        dataset: dataset file or already-parsed records
        metrics_path: optional JSONL file receiving one record per log interval
        trainer: continue from an existing trainer instead of a fresh one

    Returns:
        TrainResult: the trainer (model, optimizer, step) and the logged reports
    """
    records = load_records(dataset)[1] if isinstance(dataset, (str, Path)) else list(dataset)
    if not records:
        raise BatchTooSmallError("cannot train on an empty dataset")
    trainer = trainer or Trainer(config)
    result = TrainResult(trainer=trainer)

    sink = None
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        try:
            metrics_path.parent.mkdir(parents=True, exist_ok=True)
            sink = metrics_path.open("w")
        except OSError as e:
            raise OutputPathError(metrics_path, e.strerror or str(e))

    logger.info("Training %s variant for %d steps on %d records", config.variant, config.steps, len(records))
    try:
        for _ in range(config.steps):
            step = trainer.step
            batch = make_batch([records[i] for i in trainer.batch_indices(len(records), step)])
            report = trainer.train_step(batch)
            if step % config.log_interval == 0:
                result.reports.append(report)
                if sink is not None:
                    sink.write(_metrics_line(report) + "\n")
                logger.info(
                    "step %d L_total=%.5f L_AR=%.5f L_MAER=%.5f L_KL=%.5f grad_norm=%.4f",
                    report.step, report.L_total, report.L_AR, report.L_MAER, report.L_KL, report.grad_norm,
                )
    finally:
        if sink is not None:
            sink.close()
    return result


@torch.no_grad()
def evaluate_losses(model: MarMaerModel, batch: TrainingBatch, step: int = 0) -> Dict[str, float]:
    """Loss components on a fixed batch with the noise of a given step."""
    eps = latent_noise(model.config, len(batch), step)
    return {name: float(t) for name, t in total_loss(model, batch, eps).components.items()}
