"""Prediction-plus-reconstruction objective, staged training and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import numerics
from .corpus import IGNORE, CorruptionSpec, Sample, TrainingBatch, make_training_batch
from .model import CoralTransformer, ModelConfig, OffsetConfig, PredictionGrid

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
STAGES = ("0", "1", "2a", "2b")
_PREREQ = {"0": None, "1": None, "2a": {"1", "2a"}, "2b": {"2a", "2b"}}


class TrainingDiverged(RuntimeError):
    pass


class StageOrderError(RuntimeError):
    pass


class CheckpointCorrupt(RuntimeError):
    pass


class CheckpointVersionError(RuntimeError):
    pass


# --------------------------------------------------------------------- loss


def _term(logp, targets, valid) -> torch.Tensor | None:
    if not bool(valid.any()):
        return None
    return numerics.cross_entropy(logp, targets, valid, normalized=True)


def coral_loss_terms(
    grid_clean: PredictionGrid,
    grid_corrupt: PredictionGrid | None,
    targets: torch.Tensor,
    corruption_mask: torch.Tensor | None = None,
    token_mask: torch.Tensor | None = None,
    target_mask: torch.Tensor | None = None,
) -> dict:
    """Forward term from ``grid_clean`` (offsets >= 1), backward term from
    ``grid_corrupt`` (offsets <= 0) restricted to corrupted positions.

    ``targets`` are the clean tokens; positions outside ``target_mask``
    (default: ``targets != IGNORE``) never contribute. Each term is the mean of
    its per-offset mean cross-entropies; the total averages the terms present.
    """
    if target_mask is None:
        target_mask = targets != IGNORE
    if token_mask is None:
        token_mask = torch.ones_like(targets, dtype=torch.bool)
    if corruption_mask is None:
        corruption_mask = torch.zeros_like(targets, dtype=torch.bool)
    if corruption_mask.shape != targets.shape or target_mask.shape != targets.shape:
        raise ValueError("mask/target shape mismatch")
    corruption_mask = corruption_mask & target_mask
    t = targets.shape[1]
    per_offset: dict[int, torch.Tensor] = {}
    fwd, bwd = [], []
    for j, d in enumerate(grid_clean.offsets):
        if d < 1 or d >= t:
            continue
        logp = grid_clean.log_probs[:, : t - d, j]
        valid = target_mask[:, d:] & grid_clean.available[: t - d, j][None]
        term = _term(logp, targets[:, d:], valid)
        if term is not None:
            per_offset[d] = term
            fwd.append(term)
    if grid_corrupt is not None:
        for j, d in enumerate(grid_corrupt.offsets):
            if d > 0 or -d >= t:
                continue
            logp = grid_corrupt.log_probs[:, -d:, j]
            valid = corruption_mask[:, : t + d] & token_mask[:, -d:] & grid_corrupt.available[-d:, j][None]
            term = _term(logp, targets[:, : t + d], valid)
            if term is not None:
                per_offset[d] = term
                bwd.append(term)
    loss_fwd = torch.stack(fwd).mean() if fwd else None
    loss_bwd = torch.stack(bwd).mean() if bwd else None
    present = [x for x in (loss_fwd, loss_bwd) if x is not None]
    if present:
        total = torch.stack(present).mean()
    else:
        total = grid_clean.log_probs.sum().to(torch.float64) * 0.0
    return {"total": total, "forward": loss_fwd, "backward": loss_bwd, "per_offset": per_offset}


def coral_loss(grid_clean, grid_corrupt, targets, corruption_mask=None, token_mask=None) -> torch.Tensor:
    return coral_loss_terms(grid_clean, grid_corrupt, targets, corruption_mask, token_mask)["total"]


def _shift(mask: torch.Tensor, d: int) -> torch.Tensor:
    """``out[:, i] = mask[:, i + d]``, False where ``i + d`` falls outside."""
    out = torch.zeros_like(mask)
    t = mask.shape[1]
    if d >= 0:
        out[:, : t - d] = mask[:, d:]
    else:
        out[:, -d:] = mask[:, : t + d]
    return out


def _loss_queries(model, d: int, target_ok: torch.Tensor, query_ok: torch.Tensor):
    t = target_ok.shape[1]
    mu_ok = torch.arange(t) + model.offset_config.mu_delta(d) >= 0
    rows, pos = (query_ok & _shift(target_ok, d) & mu_ok[None]).nonzero(as_tuple=True)
    return rows, pos


def batch_loss_terms(model: CoralTransformer, batch: TrainingBatch, offsets: OffsetConfig | None = None, ar_only=False):
    """Loss terms of ``coral_loss_terms`` with the final layer run only on scored queries."""
    offsets = offsets or model.offset_config
    fwd = (1,) if ar_only else offsets.forward_offsets
    bwd = () if ar_only else offsets.backward_offsets
    t = batch.targets.shape[1]
    target_ok = batch.targets != IGNORE
    corrupted = batch.corruption_mask & target_ok
    per_offset: dict[int, torch.Tensor] = {}
    terms = {}
    for name, tokens, offs, tgt_ok, q_ok in (
        ("forward", batch.clean, [d for d in fwd if 1 <= d < t], target_ok, torch.ones_like(target_ok)),
        ("backward", batch.corrupt, [d for d in bwd if -d < t], corrupted, batch.token_mask),
    ):
        queries = [(d, *_loss_queries(model, d, tgt_ok, q_ok)) for d in offs]
        queries = [q for q in queries if len(q[1])]
        if not queries:
            terms[name] = None
            continue
        log_probs = model.gathered_log_probs(tokens, queries)
        for (d, rows, pos), lp in zip(queries, log_probs):
            per_offset[d] = numerics.cross_entropy(lp, batch.targets[rows, pos + d], normalized=True)
        terms[name] = torch.stack([per_offset[d] for d, _, _ in queries]).mean()
    present = [x for x in terms.values() if x is not None]
    if present:
        total = torch.stack(present).mean()
    else:
        total = model.embed.weight.sum().to(torch.float64) * 0.0
    return {"total": total, "forward": terms["forward"], "backward": terms["backward"], "per_offset": per_offset}


def baseline_ar_loss(model: CoralTransformer, batch: TrainingBatch) -> torch.Tensor:
    """Plain next-token cross-entropy over response tokens."""
    logits = model.next_token_logits(batch.clean)[:, :-1]
    targets = batch.targets[:, 1:]
    return numerics.cross_entropy(logits, targets, batch.target_mask[:, 1:])


# ------------------------------------------------------------------- stages


@dataclass
class StageConfig:
    """``stage``: "0" (next-token pretraining of the base model), "1" (last
    layer only), "2a" (all but the last layer), "2b" (everything)."""

    stage: str
    epochs: int = 3
    lr: float = 1e-4
    batch_size: int = 32
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    warmup_steps: int = 20
    min_lr_ratio: float = 0.1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    @property
    def selector(self) -> str:
        return {"0": "all", "1": "last", "2a": "all_but_last", "2b": "all"}[self.stage]


def toy_stages(
    pretrain_epochs: int = 12,
    stage1_epochs: int = 3,
    stage2a_epochs: int = 3,
    stage2b_epochs: int = 16,
    batch_size: int = 32,
    corruption: CorruptionSpec | None = None,
) -> list[StageConfig]:
    """Recipe tuned for the toy copy model (d 128, 4 layers) on one CPU core.

    Stage 1 runs at a high rate so the last layer re-learns the next-token
    column quickly; stage 2b gets the longest share of the budget. Single-token
    patches make reconstruction resemble the one-token slips seen in decoding.
    """
    corruption = corruption or CorruptionSpec(granularity=1)
    plan = (("0", pretrain_epochs, 1e-3), ("1", stage1_epochs, 1e-3), ("2a", stage2a_epochs, 5e-4),
            ("2b", stage2b_epochs, 5e-4))
    return [
        StageConfig(name, epochs=epochs, lr=lr, batch_size=batch_size, corruption=corruption)
        for name, epochs, lr in plan
        if epochs
    ]


def last_layer_names(model: CoralTransformer) -> set[str]:
    last = f"blocks.{model.config.n_layers - 1}."
    return {n for n, _ in model.named_parameters() if n.startswith(last) or n.startswith("final_norm.")}


def select_parameters(model: CoralTransformer, selector: str) -> list[str]:
    last = last_layer_names(model)
    names = [n for n, _ in model.named_parameters()]
    if selector == "all":
        return names
    if selector == "last":
        return [n for n in names if n in last]
    if selector == "all_but_last":
        return [n for n in names if n not in last]
    raise ValueError(f"unknown selector {selector!r}")


@dataclass
class TrainResult:
    model: CoralTransformer
    log: list[dict]
    epoch_losses: list[float]


def _lr_at(stage: StageConfig, step: int, total: int) -> float:
    if step < stage.warmup_steps:
        return stage.lr * (step + 1) / stage.warmup_steps
    frac = (step - stage.warmup_steps) / max(1, total - stage.warmup_steps)
    cos = 0.5 * (1 + math.cos(math.pi * min(frac, 1.0)))
    return stage.lr * (stage.min_lr_ratio + (1 - stage.min_lr_ratio) * cos)


def train_stage(
    model: CoralTransformer,
    stage: StageConfig,
    data: Sequence[Sample],
    seed: int = 0,
    log_path: str | Path | None = None,
    step_offset: int = 0,
) -> TrainResult:
    need = _PREREQ[stage.stage]
    if need is not None and model.training_stage not in need:
        raise StageOrderError(f"stage {stage.stage} requires a model trained through {sorted(need)}, "
                              f"got {model.training_stage!r}")
    if not data:
        raise ValueError("no training data")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    trainable = set(select_parameters(model, stage.selector))
    params = []
    for name, p in model.named_parameters():
        p.requires_grad_(name in trainable)
        if name in trainable:
            params.append(p)
    opt = numerics.make_optimizer(params, stage.lr)
    ar_only = stage.stage == "0"
    n_batches = math.ceil(len(data) / stage.batch_size)
    total_steps = n_batches * stage.epochs
    records, epoch_losses = [], []
    fh = open(log_path, "a") if log_path else None
    model.train()
    step = 0
    try:
        for epoch in range(stage.epochs):
            order = rng.permutation(len(data))
            ar_sum, ar_n = 0.0, 0
            for bi in range(n_batches):
                idx = order[bi * stage.batch_size : (bi + 1) * stage.batch_size]
                batch = make_training_batch([data[i] for i in idx], stage.corruption, rng)
                terms = batch_loss_terms(model, batch, ar_only=ar_only)
                loss = terms["total"]
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"stage {stage.stage} epoch {epoch} step {step}: loss={loss.item()} "
                        f"(lr={_lr_at(stage, step, total_steps):.2e})"
                    )
                numerics.backward(loss)
                numerics.optimizer_step(opt, _lr_at(stage, step, total_steps))
                rec = {
                    "step": step_offset + step,
                    "stage": stage.stage,
                    "loss": float(loss.detach()),
                    "loss_fwd": None if terms["forward"] is None else float(terms["forward"].detach()),
                    "loss_bwd": None if terms["backward"] is None else float(terms["backward"].detach()),
                    "per_offset_loss": {str(d): float(v.detach()) for d, v in terms["per_offset"].items()},
                }
                records.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                if 1 in terms["per_offset"]:
                    ar_sum += float(terms["per_offset"][1].detach()) * len(idx)
                    ar_n += len(idx)
                step += 1
            epoch_losses.append(ar_sum / max(ar_n, 1))
            log.info("stage %s epoch %d next-token loss %.4f", stage.stage, epoch, epoch_losses[-1])
    finally:
        if fh:
            fh.close()
        for p in model.parameters():
            p.requires_grad_(True)
        model.eval()
    model.training_stage = stage.stage
    return TrainResult(model, records, epoch_losses)


def train_pipeline(
    model: CoralTransformer,
    data: Sequence[Sample],
    stages: Iterable[StageConfig],
    seed: int = 0,
    log_path: str | Path | None = None,
) -> list[TrainResult]:
    results = []
    offset = 0
    for i, stage in enumerate(stages):
        res = train_stage(model, stage, data, seed=seed + i, log_path=log_path, step_offset=offset)
        offset += len(res.log)
        results.append(res)
    return results


# ------------------------------------------------------------------ metrics


@torch.no_grad()
def eval_token_metrics(
    model: CoralTransformer,
    data: Sequence[Sample],
    offsets: Iterable[int] | None = None,
    corruption: CorruptionSpec | None = None,
    seed: int = 0,
    batch_size: int = 64,
    top_k: int = 8,
) -> dict[int, dict]:
    """Per-offset mean cross-entropy and cumulative top-1..top-k accuracy.

    Forward offsets are scored on clean sequences over response targets;
    backward offsets on corrupted copies over corrupted positions.
    """
    offsets = tuple(sorted(model.offset_config.offsets if offsets is None else offsets))
    corruption = corruption or CorruptionSpec()
    fwd = tuple(d for d in offsets if d >= 1)
    bwd = tuple(d for d in offsets if d <= 0)
    rng = np.random.default_rng(seed)
    nll = {d: 0.0 for d in offsets}
    hits = {d: np.zeros(top_k) for d in offsets}
    count = {d: 0 for d in offsets}

    def accumulate(grid, sel_targets):
        for j, d in enumerate(grid.offsets):
            logp, tgt, valid = sel_targets(j, d)
            if not bool(valid.any()):
                continue
            lp, tg = logp[valid], tgt[valid]
            nll[d] += float(-lp.gather(1, tg[:, None]).sum())
            ranks = (lp > lp.gather(1, tg[:, None])).sum(1)
            for k in range(top_k):
                hits[d][k] += int((ranks <= k).sum())
            count[d] += int(valid.sum())

    model.eval()
    for start in range(0, len(data), batch_size):
        batch = make_training_batch(data[start : start + batch_size], corruption, rng)
        t = batch.targets.shape[1]
        if fwd:
            grid = model.forward_grid(batch.clean, fwd)

            def sel_f(j, d, grid=grid):
                if d >= t:
                    return grid.log_probs[:, :0, j], batch.targets[:, :0], batch.target_mask[:, :0]
                valid = batch.target_mask[:, d:] & grid.available[: t - d, j][None]
                return grid.log_probs[:, : t - d, j], batch.targets[:, d:], valid

            accumulate(grid, sel_f)
        if bwd and bool(batch.corruption_mask.any()):
            grid = model.forward_grid(batch.corrupt, bwd)

            def sel_b(j, d, grid=grid):
                if -d >= t:
                    return grid.log_probs[:, :0, j], batch.targets[:, :0], batch.target_mask[:, :0]
                valid = (batch.corruption_mask[:, : t + d] & batch.token_mask[:, -d:]
                         & grid.available[-d:, j][None])
                return grid.log_probs[:, -d:, j], batch.targets[:, : t + d], valid

            accumulate(grid, sel_b)
    table = {}
    for d in offsets:
        n = count[d]
        table[d] = {
            "loss": nll[d] / n if n else float("nan"),
            "topk": [h / n if n else float("nan") for h in hits[d]],
            "count": n,
        }
    return table


# -------------------------------------------------------------- checkpoints


def save_checkpoint(model: CoralTransformer, path: str | Path, step: int = 0, seed: int = 0, extra: dict | None = None):
    """Write ``manifest.json`` + ``weights.bin`` atomically (temp dir + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=path.name + ".tmp-", dir=path.parent))
    try:
        index, offset = [], 0
        with open(tmp / "weights.bin", "wb") as fh:
            for name, t in model.state_dict().items():
                arr = t.detach().cpu().contiguous().numpy().astype("<f4")
                raw = arr.tobytes(order="C")
                fh.write(raw)
                index.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset,
                              "nbytes": len(raw)})
                offset += len(raw)
        manifest = {
            "version": CHECKPOINT_VERSION,
            "model_config": model.config.to_dict(),
            "offset_config": model.offset_config.to_dict(),
            "training_stage": model.training_stage,
            "step": step,
            "seed": seed,
            "tensors": index,
            "extra": extra or {},
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2))
        if path.exists():
            old = path.with_name(path.name + ".old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointCorrupt(f"unreadable manifest in {path}: {exc}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {manifest.get('version')!r}")
    return manifest


def _strict_config(cls, data: dict, what: str):
    known = set(cls.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise CheckpointVersionError(f"unknown {what} keys: {sorted(unknown)}")
    return cls.from_dict(data)


def load_checkpoint(path: str | Path, offsets: OffsetConfig | None = None) -> CoralTransformer:
    path = Path(path)
    manifest = read_manifest(path)
    mcfg = _strict_config(ModelConfig, manifest["model_config"], "model_config")
    ocfg = _strict_config(OffsetConfig, manifest["offset_config"], "offset_config")
    if offsets is not None and offsets.to_dict() != ocfg.to_dict():
        warnings.warn("requested offset config differs from the checkpoint; using the stored one", stacklevel=2)
    try:
        blob = (path / "weights.bin").read_bytes()
    except OSError as exc:
        raise CheckpointCorrupt(f"missing weights in {path}") from exc
    model = CoralTransformer(mcfg, ocfg)
    state = model.state_dict()
    loaded = {}
    for rec in manifest["tensors"]:
        name, shape = rec["name"], tuple(rec["shape"])
        if name not in state:
            raise CheckpointCorrupt(f"unexpected tensor {name!r}")
        if tuple(state[name].shape) != shape:
            raise CheckpointCorrupt(f"shape mismatch for {name}: {shape} vs {tuple(state[name].shape)}")
        n = int(np.prod(shape, dtype=np.int64)) * 4
        lo = rec["offset"]
        if rec.get("dtype") != "f32" or rec.get("nbytes", n) != n or lo + n > len(blob):
            raise CheckpointCorrupt(f"blob for {name} truncated or malformed")
        arr = np.frombuffer(blob, dtype="<f4", count=n // 4, offset=lo).reshape(shape)
        loaded[name] = torch.from_numpy(arr.astype(np.float32))
    missing = set(state) - set(loaded)
    if missing:
        raise CheckpointCorrupt(f"missing tensors: {sorted(missing)}")
    model.load_state_dict(loaded)
    model.training_stage = manifest.get("training_stage", "init")
    model.eval()
    return model
