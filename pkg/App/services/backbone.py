"""
Two-stage hierarchical autoregressive generator.

The LR stage reads [prefix, text rows, bos, x_lr] with causal attention and
predicts the 16 LR tokens; its final hidden states at the LR token
positions are replicated 2x spatially into a 64-position context that is
added to the HR stage's inputs. Text reaches the HR stage only through
that context.
"""
import math
from typing import Optional, Tuple

import torch
import torch.nn as nn
from torch.nn import functional as F

from App.core.config import TrainConfig
from App.core.errors import TemperatureError, VocabularyError
from App.models.schemas import HR_SIDE, IMAGE_VOCAB_SIZE, LR_SIDE, LikelihoodReport
from App.services.ambiguity import FilmParams, apply_film
from App.services.shapes import expect_shape
from App.services.vocabulary import vocabulary

N_LR = LR_SIDE * LR_SIDE
N_HR = HR_SIDE * HR_SIDE
N_TEXT = 4
# prefix + text rows + bos + LR tokens
LR_SEQ_LEN = 1 + N_TEXT + 1 + N_LR


class CausalSelfAttention(nn.Module):

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        assert d_model % n_heads == 0
        # key, query, value projections for all heads, but in a batch
        self.c_attn = nn.Linear(d_model, 3 * d_model)
        self.c_proj = nn.Linear(d_model, d_model)
        self.n_heads = n_heads
        self.d_model = d_model

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, C = x.size()
        q, k, v = self.c_attn(x).split(self.d_model, dim=2)
        k = k.view(B, T, self.n_heads, C // self.n_heads).transpose(1, 2)  # (B, nh, T, hs)
        q = q.view(B, T, self.n_heads, C // self.n_heads).transpose(1, 2)
        v = v.view(B, T, self.n_heads, C // self.n_heads).transpose(1, 2)

        att = (q @ k.transpose(-2, -1)) * (1.0 / math.sqrt(k.size(-1)))
        mask = torch.ones(T, T, dtype=torch.bool, device=x.device).tril()
        # masked entries become exactly 0 after softmax, so future values never leak
        att = att.masked_fill(~mask, float("-inf"))
        att = F.softmax(att, dim=-1)
        y = att @ v
        y = y.transpose(1, 2).contiguous().view(B, T, C)
        return self.c_proj(y)


class MLP(nn.Module):

    def __init__(self, d_model: int, ff_width: int):
        super().__init__()
        self.c_fc = nn.Linear(d_model, ff_width)
        self.gelu = nn.GELU()
        self.c_proj = nn.Linear(ff_width, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.c_proj(self.gelu(self.c_fc(x)))


class Block(nn.Module):

    def __init__(self, d_model: int, n_heads: int, ff_width: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, n_heads)
        self.ln_2 = nn.LayerNorm(d_model)
        self.mlp = MLP(d_model, ff_width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln_1(x))
        x = x + self.mlp(self.ln_2(x))
        return x


class CausalStage(nn.Module):
    """Token + position embeddings, a stack of causal blocks and a readout."""

    def __init__(self, config: TrainConfig, seq_len: int):
        super().__init__()
        d = config.d_model
        self.tok_emb = nn.Embedding(IMAGE_VOCAB_SIZE + 1, d)  # +1 for the image-side bos
        self.pos_emb = nn.Parameter(torch.zeros(seq_len, d))
        self.blocks = nn.ModuleList([Block(d, config.n_heads, config.ff_width) for _ in range(config.n_layers)])
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Linear(d, IMAGE_VOCAB_SIZE)

    def run(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.pos_emb[: x.size(1)]
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)


class TextEncoder(nn.Module):
    """Frozen lookup table drawn once from N(0, 1) with a recorded seed."""

    def __init__(self, d_model: int, seed: int):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        table = torch.randn(vocabulary.n_prompt, d_model, generator=g, dtype=torch.float64)
        self.table = nn.Parameter(table.to(torch.get_default_dtype()), requires_grad=False)
        self.seed = seed

    def forward(self, prompt_tokens: torch.Tensor) -> torch.Tensor:
        expect_shape("prompt_tokens", prompt_tokens, (None, N_TEXT))
        if prompt_tokens.numel() and (prompt_tokens.min() < 0 or prompt_tokens.max() >= vocabulary.n_prompt):
            bad = prompt_tokens[(prompt_tokens < 0) | (prompt_tokens >= vocabulary.n_prompt)][0].item()
            raise VocabularyError(f"Prompt token id {bad} is out of vocabulary")
        return F.embedding(prompt_tokens, self.table.detach())


def shift_right(tokens: torch.Tensor) -> torch.Tensor:
    bos = torch.full_like(tokens[:, :1], vocabulary.image_bos_id)
    return torch.cat([bos, tokens[:, :-1]], dim=1)


class HierarchicalBackbone(nn.Module):

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.config = config
        self.text_encoder = TextEncoder(config.d_model, config.text_seed)
        self.lr_stage = CausalStage(config, LR_SEQ_LEN)
        self.hr_stage = CausalStage(config, N_HR)
        self.apply(self._init_weights)
        for stage in (self.lr_stage, self.hr_stage):
            nn.init.normal_(stage.pos_emb, mean=0.0, std=0.02)
            # zero readouts: an untrained model is exactly uniform over the 8 tokens
            nn.init.zeros_(stage.head.weight)
            nn.init.zeros_(stage.head.bias)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)

    def encode_text(self, prompt_tokens: torch.Tensor) -> torch.Tensor:
        """(B, 4) prompt ids -> (B, 4, d_model) frozen text embeddings."""
        return self.text_encoder(prompt_tokens)

    def lr_forward(self, e_T: torch.Tensor, prefix: torch.Tensor, x_lr: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Teacher-forced LR pass.

        Args:
            e_T: (B, 4, d_model) text embeddings
            prefix: (B, d_model) latent prefix row
            x_lr: (B, 16) LR token ids

        Returns:
            (logits, hidden): (B, 16, 8) next-token logits and the (B, 16, d_model)
            final hidden states at the LR token positions
        """
        d = self.config.d_model
        expect_shape("e_T", e_T, (None, N_TEXT, d))
        expect_shape("prefix", prefix, (e_T.size(0), d))
        expect_shape("x_lr", x_lr, (e_T.size(0), N_LR))
        tokens = self.lr_stage.tok_emb(torch.cat([shift_right(x_lr), x_lr[:, -1:]], dim=1))
        h = self.lr_stage.run(torch.cat([prefix[:, None, :], e_T, tokens], dim=1))
        start = 1 + N_TEXT
        logits = self.lr_stage.head(h[:, start:start + N_LR])
        hidden = h[:, start + 1:]
        return logits, hidden

    def hr_forward(self, x_hr: torch.Tensor, context: torch.Tensor, film: Optional[FilmParams] = None) -> torch.Tensor:
        """
        Teacher-forced HR pass with per-position additive context.
        If film is given it is applied to the context first.
        """
        expect_shape("x_hr", x_hr, (None, N_HR))
        expect_shape("context", context, (x_hr.size(0), N_HR, self.config.d_model))
        if film is not None:
            context = apply_film(context, film)
        h = self.hr_stage.run(self.hr_stage.tok_emb(shift_right(x_hr)) + context)
        return self.hr_stage.head(h)


def upsample_context(lr_hidden: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbour 2x replication: HR (r, c) <- LR (r // 2, c // 2)."""
    expect_shape("lr_hidden", lr_hidden, (None, N_LR, None))
    B, _, d = lr_hidden.shape
    grid = lr_hidden.view(B, LR_SIDE, LR_SIDE, d)
    grid = grid.repeat_interleave(2, dim=1).repeat_interleave(2, dim=2)
    return grid.reshape(B, N_HR, d)


def ar_loss(lr_logits: torch.Tensor, hr_logits: torch.Tensor, x_lr: torch.Tensor, x_hr: torch.Tensor) -> torch.Tensor:
    """Mean token-level cross-entropy over all 16 + 64 positions of the batch."""
    logits = torch.cat([lr_logits, hr_logits], dim=1).reshape(-1, IMAGE_VOCAB_SIZE)
    targets = torch.cat([x_lr, x_hr], dim=1).reshape(-1)
    return F.cross_entropy(logits, targets)


def per_example_log_prob(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    logp = F.log_softmax(logits, dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return logp.sum(dim=1)


def likelihood_reports(lr_logits, hr_logits, x_lr, x_hr) -> list:
    log_p_lr = per_example_log_prob(lr_logits, x_lr)
    log_p_hr = per_example_log_prob(hr_logits, x_hr)
    return [
        LikelihoodReport(log_p_lr=a, log_p_hr=b, log_p_total=a + b)
        for a, b in zip(log_p_lr.tolist(), log_p_hr.tolist())
    ]


def select_tokens(logits: torch.Tensor, temperature: float, generator: torch.Generator) -> torch.Tensor:
    """
    Pick one token per row: argmax (lowest id on ties) at temperature 0,
    otherwise a seeded draw from softmax(logits / temperature).
    """
    if temperature < 0:
        raise TemperatureError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0:
        return logits.argmax(dim=-1)
    probs = F.softmax(logits.double() / temperature, dim=-1)
    return torch.multinomial(probs, 1, generator=generator).squeeze(-1)
