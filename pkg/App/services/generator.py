import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from App.core.config import TrainConfig
from App.core.errors import TemperatureError
from App.models.schemas import LikelihoodReport
from App.services.ambiguity import AmbiguityModule, FilmParams, LatentSample
from App.services.backbone import (
    N_HR,
    N_LR,
    HierarchicalBackbone,
    likelihood_reports,
    select_tokens,
    upsample_context,
)
from App.services.maer import MetricRegularizer

logger = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ForwardOutputs:
    lr_logits: torch.Tensor
    hr_logits: torch.Tensor
    latent: Optional[LatentSample]


@dataclass
class Conditioning:
    prefix: torch.Tensor
    film: Optional[FilmParams]
    latent: Optional[LatentSample]


class MarMaerModel(nn.Module):
    """
    Backbone + ambiguity latent + metric regularizer head. All three parts
    are always built (in a fixed order, from config.seed) so that every
    variant of a seed starts from the same weights; the variant flags only
    decide which parts take part in the forward pass.
    """

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        self.backbone = HierarchicalBackbone(config)
        self.ambiguity = AmbiguityModule(config.d_model, config.latent_dim, config.logvar_clamp)
        self.maer = MetricRegularizer(config.embed_dim, config.head_hidden, config.embed_seed, config.bandwidth_floor)
        self.to(DTYPES[config.dtype])

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.config.dtype]

    def frozen_parameter_names(self) -> List[str]:
        return [name for name, p in self.named_parameters() if not p.requires_grad]

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def condition(self, e_T: torch.Tensor, eps: Optional[torch.Tensor] = None,
                  c: Optional[torch.Tensor] = None) -> Conditioning:
        """
        Build the LR prefix row and the FiLM parameters. Without the
        ambiguity variant the prefix is a zero row and there is no FiLM.
        An explicit c bypasses the posterior.
        """
        B = e_T.size(0)
        if not self.config.use_ambiguity:
            return Conditioning(prefix=e_T.new_zeros(B, self.config.d_model), film=None, latent=None)
        latent = None
        if c is None:
            latent = self.ambiguity.draw(e_T, eps)
            c = latent.c
        return Conditioning(prefix=self.ambiguity.prefix_embed(c), film=self.ambiguity.film_params(c), latent=latent)

    def forward(self, prompt_tokens: torch.Tensor, x_lr: torch.Tensor, x_hr: torch.Tensor,
                eps: Optional[torch.Tensor] = None, c: Optional[torch.Tensor] = None) -> ForwardOutputs:
        e_T = self.backbone.encode_text(prompt_tokens)
        cond = self.condition(e_T, eps=eps, c=c)
        lr_logits, lr_hidden = self.backbone.lr_forward(e_T, cond.prefix, x_lr)
        hr_logits = self.backbone.hr_forward(x_hr, upsample_context(lr_hidden), cond.film)
        return ForwardOutputs(lr_logits=lr_logits, hr_logits=hr_logits, latent=cond.latent)

    def mean_latent(self, prompt_tokens: torch.Tensor) -> torch.Tensor:
        """c = mu, or the zero vector when the variant has no latent."""
        e_T = self.backbone.encode_text(prompt_tokens)
        if not self.config.use_ambiguity:
            return e_T.new_zeros(e_T.size(0), self.config.latent_dim)
        mu, _ = self.ambiguity.posterior(e_T)
        return mu

    @torch.no_grad()
    def log_likelihood(self, x_lr: torch.Tensor, x_hr: torch.Tensor, prompt_tokens: torch.Tensor,
                       c: torch.Tensor) -> List[LikelihoodReport]:
        """Per-example log P(x_lr | T, c) + log P(x_hr | x_lr, T, c) at a fixed latent."""
        out = self.forward(prompt_tokens, x_lr, x_hr, c=c)
        return likelihood_reports(out.lr_logits, out.hr_logits, x_lr, x_hr)

    @torch.no_grad()
    def sample(self, prompt_tokens: torch.Tensor, c: torch.Tensor, temperature: float = 0.0,
               seed: int = 0) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Ancestral decoding: all 16 LR tokens first, then the 64 HR tokens.

        Args:
            prompt_tokens: (B, 4) prompt ids
            c: (B, latent_dim) latent (ignored by variants without one)
            temperature: 0 for argmax, otherwise softmax temperature
            seed: seed of the token sampler

        Returns:
            (x_lr, x_hr): (B, 16) and (B, 64) token ids
        """
        if temperature < 0:
            raise TemperatureError(f"temperature must be >= 0, got {temperature}")
        generator = torch.Generator().manual_seed(seed)
        B = prompt_tokens.size(0)
        e_T = self.backbone.encode_text(prompt_tokens)
        cond = self.condition(e_T, c=c.to(self.dtype))

        x_lr = prompt_tokens.new_zeros(B, N_LR)
        for t in range(N_LR):
            logits, _ = self.backbone.lr_forward(e_T, cond.prefix, x_lr)
            x_lr[:, t] = select_tokens(logits[:, t], temperature, generator)
        _, lr_hidden = self.backbone.lr_forward(e_T, cond.prefix, x_lr)
        context = upsample_context(lr_hidden)

        x_hr = prompt_tokens.new_zeros(B, N_HR)
        for t in range(N_HR):
            logits = self.backbone.hr_forward(x_hr, context, cond.film)
            x_hr[:, t] = select_tokens(logits[:, t], temperature, generator)
        return x_lr, x_hr


def build_model(config: TrainConfig) -> MarMaerModel:
    model = MarMaerModel(config)
    logger.debug("Built %s model with %d trainable parameters", config.variant,
                 sum(p.numel() for p in model.trainable_parameters()))
    return model
