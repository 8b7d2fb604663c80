"""Benchmark harness, per-offset analysis and analytic FLOPs accounting."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .corpus import CorruptionSpec, Sample, answer_span
from .decoder import DecodeOptions, decode
from .model import ModelConfig, OffsetConfig
from .trainer import eval_token_metrics

VARIANTS = ("nt", "ours", "ours-nv", "ours-nmf")


# -------------------------------------------------------------------- FLOPs


def flops_estimate(cfg: ModelConfig, offsets: int | Iterable[int], seq_len: int) -> int:
    """Forward-pass FLOPs (2 per multiply-accumulate) for one sequence.

    Layers ``0..L-2`` are counted once. In the last layer the K/V projections
    are shared; the query projection, attention scores, value mixing, output
    projection, feed-forward and unembedding run once per offset.
    """
    n_off = offsets if isinstance(offsets, int) else len(set(offsets))
    if n_off < 1:
        raise ValueError("need at least one offset")
    d, ff, t, v = cfg.d_model, cfg.d_ff, seq_len, cfg.vocab_size
    attn_mix = 2 * t * d  # QK^T and AV per query token, full (unmasked) length
    trunk = (cfg.n_layers - 1) * (4 * d * d + attn_mix + 3 * d * ff)
    shared_kv = 2 * d * d
    per_offset = 2 * d * d + attn_mix + 3 * d * ff + d * v
    return 2 * t * (trunk + shared_kv + n_off * per_offset)


def flops_ratio(cfg: ModelConfig, n_offsets: int, seq_len: int) -> float:
    return flops_estimate(cfg, n_offsets, seq_len) / flops_estimate(cfg, 1, seq_len)


MISTRAL_LIKE = ModelConfig(vocab_size=32768, d_model=4096, n_layers=32, n_heads=32, d_ff=14336, max_seq_len=4096)


# ---------------------------------------------------------------- benchmark


def variant_settings(name: str, offsets: OffsetConfig, base: DecodeOptions) -> tuple[OffsetConfig, DecodeOptions]:
    opts = asdict(base)
    if name == "nt":
        oc = OffsetConfig(k_fwd=1, k_bwd=0, block_size=1, epsilon=offsets.epsilon,
                          mu_convention=offsets.mu_convention)
        return oc, DecodeOptions(**{**opts, "use_verifier": False, "use_multi_forward": True, "min_refinements": 0})
    if name == "ours":
        return offsets, DecodeOptions(**{**opts, "use_verifier": True, "use_multi_forward": True})
    if name == "ours-nv":
        return offsets, DecodeOptions(**{**opts, "use_verifier": False, "use_multi_forward": True})
    if name == "ours-nmf":
        return offsets, DecodeOptions(**{**opts, "use_verifier": True, "use_multi_forward": False})
    raise ValueError(f"unknown variant {name!r}; choose from {VARIANTS}")


def is_correct(sample: Sample, output: Sequence[int]) -> bool:
    if sample.task == "modchain":
        got = answer_span(output)
        return got is not None and got == answer_span(sample.target)
    return list(output) == list(sample.target)


@dataclass
class VariantRow:
    variant: str
    accuracy: float
    accepted_tokens: int
    model_calls: int
    seconds: float
    tokens_per_second: float
    calls_per_token: float
    tokens_per_call: float
    speedup: float | None = None
    call_speedup: float | None = None
    outputs: list[list[int]] = field(default_factory=list, repr=False)


@dataclass
class BenchReport:
    task: str
    n_samples: int
    seed: int
    rows: list[VariantRow]
    per_offset: dict | None = None
    flops: dict | None = None

    def to_dict(self, with_outputs: bool = False) -> dict:
        rows = []
        for r in self.rows:
            rec = asdict(r)
            if not with_outputs:
                rec.pop("outputs")
            rows.append(rec)
        return {"task": self.task, "n_samples": self.n_samples, "seed": self.seed, "variants": rows,
                "per_offset": self.per_offset, "flops": self.flops}

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    def row(self, name: str) -> VariantRow:
        return next(r for r in self.rows if r.variant == name)


def run_benchmark(
    model,
    samples: Sequence[Sample],
    variants: Iterable[str] = VARIANTS,
    offsets: OffsetConfig | None = None,
    options: DecodeOptions | None = None,
    seed: int = 0,
) -> BenchReport:
    """Decode every sample with each variant on identical inputs and seeds.

    ``model`` is either a grid model (``forward_grid``) or a callable mapping
    a sample to one, e.g. a factory of mock oracles. Only the decode loop is
    timed.
    """
    if not samples:
        raise ValueError("empty evaluation set")
    variants = list(variants)
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; choose from {VARIANTS}")
    base_offsets = offsets or getattr(model, "offset_config", None) or OffsetConfig()
    base = options or DecodeOptions()
    model_for: Callable = (lambda s: model) if hasattr(model, "forward_grid") else model
    rows = []
    for name in variants:
        oc, opts = variant_settings(name, base_offsets, base)
        correct = tokens = calls = 0
        seconds = 0.0
        outputs = []
        for idx, s in enumerate(samples):
            m = model_for(s)
            run_opts = DecodeOptions(**{**asdict(opts), "seed": seed * 100_003 + idx})
            start = time.perf_counter()
            res = decode(m, s.context(), oc, run_opts)
            seconds += time.perf_counter() - start
            correct += is_correct(s, res.tokens)
            tokens += len(res.tokens)
            calls += res.model_calls
            outputs.append(res.tokens)
        rows.append(VariantRow(
            variant=name,
            accuracy=correct / len(samples),
            accepted_tokens=tokens,
            model_calls=calls,
            seconds=seconds,
            tokens_per_second=tokens / seconds if seconds > 0 else float("inf"),
            calls_per_token=calls / max(tokens, 1),
            tokens_per_call=tokens / max(calls, 1),
            outputs=outputs,
        ))
    nt = next((r for r in rows if r.variant == "nt"), None)
    if nt is not None:
        for r in rows:
            r.speedup = (nt.seconds / max(nt.accepted_tokens, 1)) / (r.seconds / max(r.accepted_tokens, 1))
            r.call_speedup = nt.calls_per_token / r.calls_per_token
        nt.speedup = nt.call_speedup = 1.0
    flops = None
    cfg = getattr(model, "config", None)
    if isinstance(cfg, ModelConfig):
        seq = max(len(s.sequence()) for s in samples)
        flops = {"seq_len": seq, "nt": flops_estimate(cfg, 1, seq),
                 "ours": flops_estimate(cfg, len(base_offsets.offsets), seq)}
    return BenchReport(samples[0].task, len(samples), seed, rows, flops=flops)


# ----------------------------------------------------------------- analysis


def analyze_offsets(
    model,
    samples: Sequence[Sample],
    csv_path: str | Path | None = None,
    offsets: Iterable[int] | None = None,
    corruption: CorruptionSpec | None = None,
    seed: int = 0,
) -> dict[int, dict]:
    """Per-offset loss and cumulative top-1..top-8 accuracy, optionally as CSV
    with columns ``offset, loss, top1..top8``."""
    table = eval_token_metrics(model, samples, offsets=offsets, corruption=corruption, seed=seed)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["offset", "loss", *[f"top{k}" for k in range(1, 9)]])
            for d in sorted(table):
                w.writerow([d, f"{table[d]['loss']:.6f}", *[f"{a:.6f}" for a in table[d]["topk"]]])
    return table
