"""Synthetic tasks, the fixed 64-symbol tokenizer and patch corruption."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

# Four specials first, then 60 printable symbols. Specials have one-character
# spellings so every id round-trips through text.
SPECIALS = "~^$@"  # PAD, BOS, EOS, IGNORE
PRINTABLE = "0123456789abcdefghijklmnopqrstuvwxyz+-*/=%<>() ,.;:|!?#&_[]'"
ALPHABET = SPECIALS + PRINTABLE
VOCAB_SIZE = len(ALPHABET)
PAD, BOS, EOS, IGNORE = range(4)
SEP = ALPHABET.index("|")
ANSWER = ALPHABET.index("#")
MODULUS = 97
TASKS = ("copy", "reverse", "modchain")

_INDEX = {ch: i for i, ch in enumerate(ALPHABET)}
assert VOCAB_SIZE == 64 and len(_INDEX) == 64


class EncodingError(ValueError):
    pass


def tokenize(text: str) -> list[int]:
    try:
        return [_INDEX[ch] for ch in text]
    except KeyError as exc:
        raise EncodingError(f"character {exc.args[0]!r} not in alphabet") from None


def detokenize(tokens: Iterable[int]) -> str:
    return "".join(ALPHABET[int(t)] for t in tokens)


@dataclass
class Sample:
    prompt: list[int]
    target: list[int]
    task: str
    seed: int

    def __post_init__(self):
        if not self.prompt or not self.target:
            raise ValueError("prompt and target must be nonempty")
        if self.target[-1] != EOS:
            raise ValueError("target must end with EOS")

    def context(self) -> list[int]:
        """Model input preceding the response: BOS, prompt, separator."""
        return [BOS, *self.prompt, SEP]

    def sequence(self) -> list[int]:
        return self.context() + self.target


def encode_prompt(text: str) -> list[int]:
    return [BOS, *tokenize(text), SEP]


# -------------------------------------------------------------------- tasks


def modchain_scratchpad(operands: Sequence[int]) -> str:
    acc = operands[0]
    steps = []
    for x in operands[1:]:
        nxt = (acc + x) % MODULUS
        steps.append(f"{acc}+{x}={nxt}")
        acc = nxt
    return ";".join(steps) + f"#{acc}"


def evaluate_modchain(prompt_text: str) -> int:
    total = 0
    for part in prompt_text.split("+"):
        total = (total + int(part)) % MODULUS
    return total


def answer_span(tokens: Sequence[int]) -> list[int] | None:
    """Tokens between the last answer marker and EOS (or the end)."""
    tokens = list(tokens)
    if EOS in tokens:
        tokens = tokens[: tokens.index(EOS)]
    if ANSWER not in tokens:
        return None
    start = len(tokens) - tokens[::-1].index(ANSWER)
    return tokens[start:]


def gen_task(task: str, seed: int, count: int, length_range: tuple[int, int] = (4, 12)) -> list[Sample]:
    """Deterministic samples. ``length_range`` counts letters (copy, reverse)
    or operands (modchain), inclusive."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {TASKS}")
    if count < 1:
        raise ValueError("count must be >= 1")
    lo, hi = length_range
    if task == "modchain":
        lo = max(lo, 2)
    if lo < 1 or hi < lo:
        raise ValueError(f"bad length_range {length_range}")
    out = []
    for idx in range(count):
        sample_seed = seed * 1_000_003 + idx
        rng = np.random.default_rng(sample_seed)
        n = int(rng.integers(lo, hi + 1))
        if task == "modchain":
            operands = [int(v) for v in rng.integers(0, MODULUS, size=n)]
            prompt_text = "+".join(str(v) for v in operands)
            target_text = modchain_scratchpad(operands)
        else:
            letters = "".join(PRINTABLE[10 + int(v)] for v in rng.integers(0, 26, size=n))
            prompt_text = letters
            target_text = letters if task == "copy" else letters[::-1]
        out.append(Sample(tokenize(prompt_text), tokenize(target_text) + [EOS], task, sample_seed))
    return out


def dump_samples(samples: Iterable[Sample], path: str | Path) -> None:
    """JSON-lines, one ``{task, seed, prompt, target}`` record per sample; the
    token lists are stored as alphabet text (EOS spelled ``$``)."""
    with open(path, "w") as fh:
        for s in samples:
            rec = {"task": s.task, "seed": s.seed, "prompt": detokenize(s.prompt), "target": detokenize(s.target)}
            fh.write(json.dumps(rec) + "\n")


def load_samples(path: str | Path) -> list[Sample]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append(Sample(tokenize(rec["prompt"]), tokenize(rec["target"]), rec["task"], int(rec["seed"])))
    return out


# --------------------------------------------------------------- corruption


@dataclass
class CorruptionSpec:
    granularity: int = 4
    ratio: float = 0.25
    strategy_mix: float = 0.5  # probability of random-patch over repeat-first

    def __post_init__(self):
        if self.granularity < 1:
            raise ValueError("granularity must be >= 1")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("ratio must lie in [0, 1]")
        if not 0.0 <= self.strategy_mix <= 1.0:
            raise ValueError("strategy_mix must lie in [0, 1]")


@dataclass
class CorruptedSample:
    tokens: list[int]
    mask: list[bool]
    original: list[int]
    sample: Sample | None = None
    strategies: list[str] = field(default_factory=list)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def num_corrupted_patches(length: int, spec: CorruptionSpec) -> int:
    return round_half_up(spec.ratio * (length // spec.granularity))


def corrupt_sequence(
    y: Sequence[int], spec: CorruptionSpec, rng: np.random.Generator, sample: Sample | None = None
) -> CorruptedSample:
    """Corrupt ``round(r * floor(T/g))`` of the non-overlapping ``g``-token patches.

    A trailing EOS is excluded from ``T`` and never touched; tail tokens past
    the last full patch are never corrupted.
    """
    y = [int(t) for t in y]
    body = len(y) - 1 if y and y[-1] == EOS else len(y)
    g = spec.granularity
    if body < g:
        raise ValueError(f"sequence of length {body} shorter than granularity {g}")
    n_patches = body // g
    n_pick = num_corrupted_patches(body, spec)
    out = list(y)
    mask = [False] * len(y)
    strategies = []
    if n_pick:
        for p in sorted(int(v) for v in rng.choice(n_patches, size=n_pick, replace=False)):
            lo = p * g
            use_random = rng.random() < spec.strategy_mix and n_patches > 1
            if use_random:
                others = [q for q in range(n_patches) if q != p]
                src = others[int(rng.integers(len(others)))] * g
                out[lo : lo + g] = y[src : src + g]
                strategies.append("random_patch")
            else:
                out[lo + 1 : lo + g] = [y[lo]] * (g - 1)
                strategies.append("repeat_first")
            mask[lo : lo + g] = [True] * g
    return CorruptedSample(out, mask, y, sample, strategies)


# ------------------------------------------------------------------ batches


@dataclass
class TrainingBatch:
    """Aligned clean/corrupted rows, right-padded with PAD.

    ``targets`` holds the clean token on response positions and IGNORE on
    prompt and padding positions.
    """

    clean: torch.Tensor  # [B, T]
    corrupt: torch.Tensor  # [B, T]
    targets: torch.Tensor  # [B, T]
    corruption_mask: torch.Tensor  # [B, T] bool
    token_mask: torch.Tensor  # [B, T] bool, False on padding

    @property
    def target_mask(self) -> torch.Tensor:
        return self.targets != IGNORE

    def __len__(self) -> int:
        return self.clean.shape[0]


def make_training_batch(samples: Sequence[Sample], spec: CorruptionSpec, rng: np.random.Generator) -> TrainingBatch:
    if not samples:
        raise ValueError("empty sample list")
    rows = []
    for s in samples:
        ctx = s.context()
        if len(s.target) - 1 >= spec.granularity:
            cs = corrupt_sequence(s.target, spec, rng, s)
            tgt_c, mask_c = cs.tokens, cs.mask
        else:
            tgt_c, mask_c = list(s.target), [False] * len(s.target)
        rows.append((ctx, s.target, tgt_c, mask_c))
    width = max(len(ctx) + len(t) for ctx, t, _, _ in rows)
    b = len(rows)
    clean = torch.full((b, width), PAD, dtype=torch.long)
    corrupt = torch.full((b, width), PAD, dtype=torch.long)
    targets = torch.full((b, width), IGNORE, dtype=torch.long)
    cmask = torch.zeros((b, width), dtype=torch.bool)
    tmask = torch.zeros((b, width), dtype=torch.bool)
    for r, (ctx, tgt, tgt_c, mask_c) in enumerate(rows):
        p, n = len(ctx), len(ctx) + len(tgt)
        clean[r, :n] = torch.tensor(ctx + tgt)
        corrupt[r, :n] = torch.tensor(ctx + tgt_c)
        targets[r, p:n] = torch.tensor(tgt)
        cmask[r, p:n] = torch.tensor(mask_c)
        tmask[r, :n] = True
    return TrainingBatch(clean, corrupt, targets, cmask, tmask)
