"""
Text-conditional Gaussian latent c ~ N(mu, diag(sigma^2)) that carries the
chosen interpretation of a prompt. It enters the LR stage as one prefix row
and the HR stage as a FiLM modulation of the upsampled context.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn

from App.services.shapes import expect_shape


@dataclass
class LatentSample:
    mu: torch.Tensor
    log_var: torch.Tensor
    eps: torch.Tensor
    c: torch.Tensor


@dataclass
class FilmParams:
    gamma: torch.Tensor
    beta: torch.Tensor


def sample_latent(mu: torch.Tensor, log_var: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw; eps = 0 gives the mean mode c = mu."""
    return mu + torch.exp(0.5 * log_var) * eps


def kl_loss(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """
    KL(N(mu, diag(exp(log_var))) || N(0, I)) summed over latent dims and
    averaged over any leading batch dims.
    """
    kl = 0.5 * (mu.pow(2) + torch.exp(log_var) - 1.0 - log_var)
    return kl.sum(dim=-1).mean()


def apply_film(context: torch.Tensor, film: FilmParams) -> torch.Tensor:
    """out[p] = gamma * context[p] + beta for every HR position p."""
    expect_shape("context", context, (None, None, None))
    B, _, d = context.shape
    expect_shape("gamma", film.gamma, (B, d))
    expect_shape("beta", film.beta, (B, d))
    return film.gamma[:, None, :] * context + film.beta[:, None, :]


class AmbiguityModule(nn.Module):

    def __init__(self, d_model: int, latent_dim: int, logvar_clamp: float = 10.0):
        super().__init__()
        self.latent_dim = latent_dim
        self.logvar_clamp = logvar_clamp
        self.encoder = nn.Sequential(
            nn.Linear(d_model, d_model),
            nn.SiLU(),
            nn.Linear(d_model, 2 * latent_dim),
        )
        self.prefix = nn.Linear(latent_dim, d_model)
        self.film_gamma = nn.Linear(latent_dim, d_model)
        self.film_beta = nn.Linear(latent_dim, d_model)

        # q(c|T) starts at N(0, I); FiLM starts at the identity
        for layer in (self.encoder[-1], self.film_gamma, self.film_beta):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)
        nn.init.normal_(self.prefix.weight, mean=0.0, std=0.02)
        nn.init.zeros_(self.prefix.bias)

    def posterior(self, e_T: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Mean-pool the text rows, then map to (mu, log_var)."""
        expect_shape("e_T", e_T, (None, None, self.encoder[0].in_features))
        out = self.encoder(e_T.mean(dim=1))
        mu, log_var = out.split(self.latent_dim, dim=-1)
        return mu, self.clamp_log_var(log_var)

    def clamp_log_var(self, log_var: torch.Tensor) -> torch.Tensor:
        return log_var.clamp(-self.logvar_clamp, self.logvar_clamp)

    def draw(self, e_T: torch.Tensor, eps: Optional[torch.Tensor]) -> LatentSample:
        mu, log_var = self.posterior(e_T)
        if eps is None:
            eps = torch.zeros_like(mu)
        return LatentSample(mu=mu, log_var=log_var, eps=eps, c=sample_latent(mu, log_var, eps))

    def prefix_embed(self, c: torch.Tensor) -> torch.Tensor:
        return self.prefix(c)

    def film_params(self, c: torch.Tensor) -> FilmParams:
        return FilmParams(gamma=1.0 + self.film_gamma(c), beta=self.film_beta(c))
