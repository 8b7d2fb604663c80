"""Decoder-only transformer with target-aware rotary queries in the last layer.

Layers ``0..L-2`` are a plain pre-norm RoPE transformer. The last layer runs
its attention once per requested offset ``d``: keys and values are shared,
only the query is rotated to the target position ``mu``. Every offset reuses
the same weights and the tied unembedding, so the parameter count does not
depend on how many offsets are predicted.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Literal

import torch
from torch import nn

from . import numerics

MuConvention = Literal["target", "target_minus_one"]


class ConfigError(ValueError):
    pass


def default_lambda(d: int, base: float = 0.7) -> float:
    return 1.0 if d <= 1 else base ** (d - 1)


@dataclass
class OffsetConfig:
    """Dependency window plus the decoding knobs tied to it.

    Forward offsets are ``1..k_fwd``; backward offsets are
    ``0, -1, .., -(k_bwd-1)``.
    """

    k_fwd: int = 4
    k_bwd: int = 8
    lambda_base: float = 0.7
    lambdas: dict[int, float] = field(default_factory=dict)
    gamma: tuple[float, ...] = (1.0, 1.1, 1.2, 1.3)
    epsilon: float = 0.2
    block_size: int = 64
    mu_convention: MuConvention = "target_minus_one"

    def __post_init__(self):
        self.lambdas = {int(k): float(v) for k, v in self.lambdas.items()}
        self.gamma = tuple(float(g) for g in self.gamma)
        if self.k_fwd < 1:
            raise ConfigError("k_fwd must be >= 1")
        if self.k_bwd < 0:
            raise ConfigError("k_bwd must be >= 0")
        if self.block_size < 1:
            raise ConfigError("block_size must be >= 1")
        if self.mu_convention not in ("target", "target_minus_one"):
            raise ConfigError(f"unknown mu_convention {self.mu_convention!r}")
        for d in self.offsets:
            lam = self.lam(d)
            if not 0.0 <= lam <= 1.0:
                raise ConfigError(f"lambda[{d}]={lam} outside [0, 1]")
        if self.lam(1) != 1.0:
            raise ConfigError("lambda[1] must be 1")
        if not self.gamma or any(g < 1.0 for g in self.gamma):
            raise ConfigError("gamma entries must be >= 1")

    @property
    def forward_offsets(self) -> tuple[int, ...]:
        return tuple(range(1, self.k_fwd + 1))

    @property
    def backward_offsets(self) -> tuple[int, ...]:
        return tuple(range(0, -self.k_bwd, -1))

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(sorted(self.forward_offsets + self.backward_offsets))

    def lam(self, d: int) -> float:
        if d in self.lambdas:
            return self.lambdas[d]
        return default_lambda(d, self.lambda_base)

    def gamma_at(self, depth: int) -> float:
        return self.gamma[min(depth, len(self.gamma) - 1)]

    def mu_delta(self, d: int) -> int:
        """Rotation added to the query's own position for offset ``d``."""
        return d - 1 if self.mu_convention == "target_minus_one" else d

    def to_dict(self) -> dict:
        out = asdict(self)
        out["gamma"] = list(self.gamma)
        out["lambdas"] = {str(k): v for k, v in self.lambdas.items()}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "OffsetConfig":
        return cls(**data)


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 96
    rope_base: float = 10000.0
    d_ff: int | None = None
    embed_std: float = 0.002
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for RoPE")
        if self.n_layers < 1:
            raise ConfigError("need at least one layer")
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


# --------------------------------------------------------------------- RoPE


def rope_frequencies(dim: int, base: float = 10000.0) -> torch.Tensor:
    if dim % 2:
        raise ConfigError("RoPE needs an even dimension")
    return 1.0 / (base ** (torch.arange(0, dim, 2, dtype=torch.float64) / dim))


def apply_rope(x: torch.Tensor, positions: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotate consecutive pairs ``(2j, 2j+1)`` of the last axis by ``pos * theta_j``.

    ``positions`` broadcasts against ``x.shape[:-1]``.
    """
    inv_freq = rope_frequencies(x.shape[-1], base)
    angles = positions.to(torch.float64).unsqueeze(-1) * inv_freq  # f64: f32 angles drift at large positions
    cos, sin = angles.cos().to(x.dtype), angles.sin().to(x.dtype)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1)
    return out.flatten(-2)


def rope_encode(vec: torch.Tensor, position: int, base: float = 10000.0) -> torch.Tensor:
    return apply_rope(vec, torch.tensor(position), base)


def target_aware_query(
    q: torch.Tensor,
    base_pos: int,
    offset: int,
    convention: MuConvention = "target_minus_one",
    base: float = 10000.0,
) -> torch.Tensor | None:
    """Query rotated to the target position; ``None`` if that position is negative."""
    mu = base_pos + offset - (1 if convention == "target_minus_one" else 0)
    if mu < 0:
        return None
    return rope_encode(q, mu, base)


# ------------------------------------------------------------------- layers


class SwiGLU(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.w_gate = nn.Linear(d_model, d_ff, bias=False)
        self.w_up = nn.Linear(d_model, d_ff, bias=False)
        self.w_down = nn.Linear(d_ff, d_model, bias=False)

    def forward(self, x):
        return self.w_down(nn.functional.silu(self.w_gate(x)) * self.w_up(x))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.head_dim
        self.rope_base = cfg.rope_base
        self.attn_norm = nn.RMSNorm(cfg.d_model, eps=1e-6)
        self.wq = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.wk = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.wv = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.wo = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.ffn_norm = nn.RMSNorm(cfg.d_model, eps=1e-6)
        self.ffn = SwiGLU(cfg.d_model, cfg.d_ff)

    def _heads(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        return self.forward_queries(x, positions, [positions])[0]

    def forward_queries(
        self, x: torch.Tensor, positions: torch.Tensor, query_positions: list[torch.Tensor]
    ) -> list[torch.Tensor]:
        """One output stream per entry of ``query_positions``; K/V computed once."""
        b, t, c = x.shape
        h = self.attn_norm(x)
        q = self._heads(self.wq(h))
        k = apply_rope(self._heads(self.wk(h)), positions, self.rope_base)
        v = self._heads(self.wv(h))
        causal = torch.ones(t, t, dtype=torch.bool).tril()
        scale = 1.0 / math.sqrt(self.head_dim)
        outs = []
        for qpos in query_positions:
            qr = apply_rope(q, qpos, self.rope_base)
            scores = numerics.matmul(qr, k.transpose(-1, -2)) * scale
            scores = scores.masked_fill(~causal, float("-inf"))
            att = numerics.matmul(numerics.softmax(scores, axis=-1), v)
            y = x + self.wo(att.transpose(1, 2).reshape(b, t, c))
            outs.append(y + self.ffn(self.ffn_norm(y)))
        return outs

    def forward_gathered(
        self, x: torch.Tensor, positions: torch.Tensor, rows: torch.Tensor, pos: torch.Tensor, qpos: torch.Tensor
    ) -> torch.Tensor:
        """Outputs ``[N, C]`` for the queries at ``(rows[n], pos[n])`` rotated to ``qpos[n]``."""
        b, t, c = x.shape
        h = self.attn_norm(x)
        k = apply_rope(self._heads(self.wk(h)), positions, self.rope_base)
        v = self._heads(self.wv(h))
        n = rows.shape[0]
        q = self.wq(h[rows, pos]).view(n, self.n_heads, 1, self.head_dim)
        q = apply_rope(q, qpos[:, None, None], self.rope_base)
        scores = numerics.matmul(q, k[rows].transpose(-1, -2)) / math.sqrt(self.head_dim)
        future = torch.arange(t)[None, :] > pos[:, None]
        scores = scores.masked_fill(future[:, None, None, :], float("-inf"))
        att = numerics.matmul(numerics.softmax(scores, axis=-1), v[rows])
        y = x[rows, pos] + self.wo(att.reshape(n, c))
        return y + self.ffn(self.ffn_norm(y))


@dataclass
class PredictionGrid:
    """Per-position, per-offset log-distributions from one forward pass.

    ``log_probs[b, i, j]`` is the distribution over the token at position
    ``i + offsets[j]`` given tokens ``<= i`` of row ``b``.
    """

    log_probs: torch.Tensor  # [B, T, D, V]
    available: torch.Tensor  # [T, D] bool
    offsets: tuple[int, ...]

    def column(self, d: int) -> int:
        try:
            return self.offsets.index(d)
        except ValueError:
            raise KeyError(f"offset {d} not in grid") from None

    def has(self, i: int, d: int) -> bool:
        if d not in self.offsets or not 0 <= i < self.log_probs.shape[1]:
            return False
        return bool(self.available[i, self.column(d)])

    def entry(self, i: int, d: int, row: int = 0) -> torch.Tensor:
        return self.log_probs[row, i, self.column(d)]


class CoralTransformer(nn.Module):
    def __init__(self, config: ModelConfig, offsets: OffsetConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config
        self.offset_config = offsets or OffsetConfig()
        self.training_stage = "init"
        self.embed = nn.Embedding(config.vocab_size, config.d_model)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.final_norm = nn.RMSNorm(config.d_model, eps=1e-6)
        self._init_weights(seed)

    def _init_weights(self, seed: int) -> None:
        g = numerics.generator(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name == "embed.weight":
                    p.normal_(0.0, self.config.embed_std, generator=g)
                elif p.dim() >= 2:
                    p.normal_(0.0, self.config.init_std, generator=g)

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def max_seq_len(self) -> int:
        return self.config.max_seq_len

    @property
    def final_layer(self) -> Block:
        return self.blocks[-1]

    def _check(self, tokens: torch.Tensor) -> torch.Tensor:
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.dim() == 1:
            tokens = tokens[None]
        if tokens.shape[-1] == 0:
            raise ValueError("empty input")
        if tokens.shape[-1] > self.config.max_seq_len:
            raise ValueError(f"sequence length {tokens.shape[-1]} exceeds max_seq_len {self.config.max_seq_len}")
        return tokens

    def _trunk(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        positions = torch.arange(tokens.shape[-1])
        x = self.embed(tokens)
        for block in self.blocks[:-1]:
            x = block(x, positions)
        return x, positions

    def _unembed(self, x: torch.Tensor) -> torch.Tensor:
        return numerics.matmul(self.final_norm(x), self.embed.weight.t())

    def next_token_logits(self, tokens) -> torch.Tensor:
        """Vanilla next-token logits ``[B, T, V]`` (standard RoPE everywhere)."""
        tokens = self._check(tokens)
        x, positions = self._trunk(tokens)
        x = self.final_layer(x, positions)
        return self._unembed(x)

    def forward_grid(self, tokens, offsets=None) -> PredictionGrid:
        tokens = self._check(tokens)
        offsets = tuple(sorted(set(self.offset_config.offsets if offsets is None else offsets)))
        if not offsets:
            raise ValueError("no offsets requested")
        x, positions = self._trunk(tokens)
        qpos = [positions + self.offset_config.mu_delta(d) for d in offsets]
        streams = self.final_layer.forward_queries(x, positions, qpos)
        log_probs = torch.stack([numerics.log_softmax(self._unembed(s)) for s in streams], dim=2)
        t = tokens.shape[-1]
        target = positions[:, None] + torch.tensor(offsets)[None, :]
        mu = torch.stack(qpos, dim=1)
        available = (target >= 0) & (target < self.config.max_seq_len) & (mu >= 0)
        return PredictionGrid(log_probs=log_probs, available=available[:t], offsets=offsets)

    def gathered_log_probs(
        self, tokens, queries: list[tuple[int, torch.Tensor, torch.Tensor]]
    ) -> list[torch.Tensor]:
        """Log-distributions ``[N_d, V]`` for each ``(d, rows, positions)`` query set.

        Only the requested queries pass through the final layer, so this is the
        cheap training path. It agrees with ``forward_grid`` up to rounding.
        """
        tokens = self._check(tokens)
        x, positions = self._trunk(tokens)
        rows = torch.cat([r for _, r, _ in queries])
        pos = torch.cat([p for _, _, p in queries])
        qpos = torch.cat([p + self.offset_config.mu_delta(d) for d, _, p in queries])
        y = self.final_layer.forward_gathered(x, positions, rows, pos, qpos)
        log_probs = numerics.log_softmax(self._unembed(y))
        return list(log_probs.split([len(r) for _, r, _ in queries]))

    def forward(self, tokens, offsets=None) -> PredictionGrid:
        return self.forward_grid(tokens, offsets)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def closed_form_param_count(cfg: ModelConfig) -> int:
    d, ff = cfg.d_model, cfg.d_ff
    per_layer = 4 * d * d + 3 * d * ff + 2 * d
    return cfg.vocab_size * d + cfg.n_layers * per_layer + d
