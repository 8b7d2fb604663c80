"""Sliding blockwise order-agnostic decoding.

Each iteration drafts a block ``[t_s, t_e]`` from the ensemble of every
available dependency, optionally verifies a tree of candidate fillings in one
batched forward pass, splices the winner into the buffer and slides the block
start past the prefix that survives per-token rejection sampling. Rejected
tokens stay in the buffer as drafts and are refined in later iterations.

Positions in this module are absolute indices into the model input
(prompt context followed by the output).
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import numerics
from .corpus import EOS, PAD
from .model import OffsetConfig, PredictionGrid


class DecodeError(ValueError):
    pass


# ------------------------------------------------------------------ grid view


class GridView:
    """One row of a prediction grid, restricted to conditioning prefixes that
    exist in a buffer of ``length`` tokens."""

    def __init__(self, log_probs: np.ndarray, available: np.ndarray, offsets: Sequence[int], length: int):
        self.log_probs = log_probs  # [T, D, V]
        self.available = available  # [T, D]
        self.offsets = tuple(offsets)
        self.length = length
        self._col = {d: j for j, d in enumerate(self.offsets)}

    @classmethod
    def from_grid(cls, grid: PredictionGrid, row: int = 0, length: int | None = None) -> "GridView":
        lp = grid.log_probs[row].detach().to(torch.float64).numpy()
        av = np.asarray(grid.available, dtype=bool)
        return cls(lp, av, grid.offsets, lp.shape[0] if length is None else length)

    def has(self, i: int, d: int) -> bool:
        j = self._col.get(d)
        return j is not None and 0 <= i < self.length and bool(self.available[i, j])

    def dist(self, i: int, d: int) -> np.ndarray:
        return self.log_probs[i, self._col[d]]

    def logp(self, t: int, token: int, d: int) -> float:
        """log p(token at t | y_{<= t-d})."""
        return float(self.log_probs[t - d, self._col[d], token])

    def dependencies(self, t: int) -> list[int]:
        """Offsets ``d`` with an available prediction for position ``t``."""
        return [d for d in self.offsets if self.has(t - d, d)]


# ------------------------------------------------------------------- scoring


def dependency_weights(deps: Sequence[int], offsets: OffsetConfig, context_conf: Sequence[float]) -> np.ndarray:
    """Normalized ``lambda_d * c(context)`` for each dependency offset."""
    if not len(deps):
        raise DecodeError("no available dependency")
    w = np.array([offsets.lam(d) * c for d, c in zip(deps, context_conf)], dtype=np.float64)
    if w.sum() <= 0:
        # every context has zero confidence: fall back to the distance decay alone
        w = np.array([offsets.lam(d) for d in deps], dtype=np.float64)
        if w.sum() <= 0:
            w = np.ones(len(deps))
    return w / w.sum()


def ensemble_log_distribution(log_probs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """log of softmax(sum_j w_j log p_j), the normalized weighted geometric mean."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if log_probs.ndim != 2 or log_probs.shape[0] != weights.shape[0]:
        raise DecodeError("one weight per dependency distribution required")
    if log_probs.shape[0] == 1:
        return log_probs[0].copy()
    mix = weights @ log_probs / weights.sum()
    mix = mix - mix.max()
    return mix - np.log(np.exp(mix).sum())


def ensemble_distribution(log_probs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return np.exp(ensemble_log_distribution(log_probs, weights))


def verification_score(view: GridView, t: int, token: int, offsets: OffsetConfig) -> float:
    """lambda-weighted mean log-probability over the next-token and backward dependencies."""
    terms = [(offsets.lam(d), view.logp(t, token, d)) for d in [1, *offsets.backward_offsets] if view.has(t - d, d)]
    if not terms:
        raise DecodeError(f"no next-token or backward prediction for position {t}")
    lam = np.array([x[0] for x in terms])
    lp = np.array([x[1] for x in terms])
    if lam.sum() <= 0:
        return float(lp.mean())
    return float((lam * lp).sum() / lam.sum())


def contrastive_score(view: GridView, t: int, token: int, offsets: OffsetConfig) -> float:
    """Clamped margin of the next-token log-prob over long forward predictions
    (weights ``1/lambda``, so longer dependencies are penalized harder)."""
    if not view.has(t - 1, 1):
        return 0.0
    longs = [d for d in range(2, offsets.k_fwd + 1) if view.has(t - d, d) and offsets.lam(d) > 0]
    if not longs:
        return 0.0
    w = np.array([1.0 / offsets.lam(d) for d in longs])
    lp = np.array([view.logp(t, token, d) for d in longs])
    return max(0.0, view.logp(t, token, 1) - float((w * lp).sum() / w.sum()))


def entropy(log_p: np.ndarray) -> float:
    p = np.exp(log_p)
    return float(-(p * np.where(p > 0, log_p, 0.0)).sum())


def acceptance_probability(view: GridView, t: int, token: int, offsets: OffsetConfig) -> float:
    """Fraction of next-token/backward dependencies whose probability of
    ``token`` clears the entropy-adaptive threshold."""
    deps = [d for d in [1, *offsets.backward_offsets] if view.has(t - d, d)]
    if not deps:
        raise DecodeError(f"no dependency to score position {t}")
    eps = offsets.epsilon
    passed = 0
    for d in deps:
        dist = view.dist(t - d, d)
        threshold = min(eps, eps * np.exp(-entropy(dist)))
        passed += float(np.exp(dist[token])) > threshold
    return passed / len(deps)


def accept_token(c: float, rng: np.random.Generator) -> bool:
    """Rejection test: keep a drafted token when a uniform draw falls below ``c``."""
    return bool(rng.random() < c)


# -------------------------------------------------------------------- tree


@dataclass
class TreeNode:
    depth: int
    rank: int
    token: int
    prob: float
    parent: int  # -1 for children of the root
    score: float


@dataclass
class CandidateTree:
    nodes: list[TreeNode]
    budget: int

    def children(self, idx: int) -> list[int]:
        return [k for k, n in enumerate(self.nodes) if n.parent == idx]

    def path(self, idx: int) -> list[int]:
        out = []
        while idx >= 0:
            out.append(idx)
            idx = self.nodes[idx].parent
        return out[::-1]

    def leaves(self) -> list[int]:
        parents = {n.parent for n in self.nodes}
        return [k for k in range(len(self.nodes)) if k not in parents]

    def leaf_paths(self) -> list[list[int]]:
        """Token sequences from the root to every leaf."""
        return [[self.nodes[k].token for k in self.path(leaf)] for leaf in self.leaves()]


def gamma_schedule(gamma: Sequence[float]) -> Callable[[int], float]:
    gamma = tuple(gamma)
    return lambda depth: gamma[min(depth, len(gamma) - 1)]


def build_candidate_tree(
    topk: Sequence[tuple[Sequence[int], Sequence[float]]],
    gamma: Sequence[float],
    node_budget: int,
) -> CandidateTree:
    """Greedy tree over block positions.

    ``topk[j]`` is ``(tokens, probs)`` for block position ``j``, probabilities
    sorted descending. A node's score is the product over its path of
    ``p / gamma[depth]``; the frontier node with the highest score is added
    until ``node_budget`` nodes exist. Ties go to the lower token id.
    """
    if node_budget < 1:
        raise DecodeError("node budget must be >= 1")
    g = gamma_schedule(gamma)
    nodes: list[TreeNode] = []
    heap: list = []

    def push_children(parent: int, depth: int, base: float):
        if depth >= len(topk):
            return
        tokens, probs = topk[depth]
        for rank, (tok, p) in enumerate(zip(tokens, probs)):
            score = base * float(p) / g(depth)
            heapq.heappush(heap, (-score, depth, int(tok), rank, parent))

    push_children(-1, 0, 1.0)
    while heap and len(nodes) < node_budget:
        neg, depth, tok, rank, parent = heapq.heappop(heap)
        nodes.append(TreeNode(depth, rank, tok, float(topk[depth][1][rank]), parent, -neg))
        push_children(len(nodes) - 1, depth + 1, -neg)
    return CandidateTree(nodes, node_budget)


# ------------------------------------------------------------------- decode


@dataclass
class DecodeOptions:
    use_verifier: bool = True
    use_multi_forward: bool = True
    max_len: int = 64
    min_refinements: int = 0
    node_budget: int = 64
    tree_topk: int = 3
    max_stall: int = 16
    seed: int = 0


@dataclass
class DecodeState:
    seq: list[int]
    prompt_len: int
    t_s: int
    t_e: int
    confidence: list[float]
    refinements: list[int]
    rng: np.random.Generator

    def context_confidence(self, i: int, window: int) -> float:
        if i < self.prompt_len:
            return 1.0
        lo = max(self.prompt_len, i - window + 1)
        return float(np.mean(self.confidence[lo : i + 1]))

    def resize(self, n: int) -> None:
        self.confidence = (self.confidence + [0.0] * n)[:n]
        self.refinements = (self.refinements + [0] * n)[:n]


@dataclass
class DecodeResult:
    tokens: list[int]
    complete: bool
    trace: list[dict]
    model_calls: int
    iterations: int

    @property
    def tokens_per_call(self) -> float:
        return len(self.tokens) / max(self.model_calls, 1)


class _Caller:
    def __init__(self, model, offsets: tuple[int, ...]):
        self.model = model
        self.offsets = offsets
        self.calls = 0

    def __call__(self, seqs: Sequence[Sequence[int]]) -> list[GridView]:
        """One batched forward pass; rows are right-padded, which causality makes harmless."""
        self.calls += 1
        width = max(len(q) for q in seqs)
        batch = torch.tensor([list(q) + [PAD] * (width - len(q)) for q in seqs], dtype=torch.long)
        with torch.no_grad():
            grid = self.model.forward_grid(batch, self.offsets)
        lp = grid.log_probs.detach().to(torch.float64).numpy()
        av = np.asarray(grid.available, dtype=bool)
        return [GridView(lp[r], av, grid.offsets, len(seqs[r])) for r in range(len(seqs))]


def _ensemble_at(view: GridView, state: DecodeState, t: int, offsets: OffsetConfig) -> np.ndarray:
    deps = view.dependencies(t)
    conf = [state.context_confidence(t - d, offsets.block_size) for d in deps]
    w = dependency_weights(deps, offsets, conf)
    return ensemble_log_distribution(np.stack([view.dist(t - d, d) for d in deps]), w)


def _cut_at_eos(tokens: Sequence[int]) -> list[int]:
    tokens = list(tokens)
    return tokens[: tokens.index(EOS) + 1] if EOS in tokens else tokens


def _top(log_pi: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-log_pi, kind="stable")[:k]
    return order, np.exp(log_pi[order])


def decode(model, prompt: Sequence[int], offsets: OffsetConfig, options: DecodeOptions | None = None) -> DecodeResult:
    """Decode a continuation of ``prompt`` (the full model context)."""
    opts = options or DecodeOptions()
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise DecodeError("prompt must be nonempty")
    p_len = len(prompt)
    limit = min(p_len + opts.max_len, model.max_seq_len)
    if limit <= p_len:
        raise DecodeError("max_len leaves no room after the prompt")
    k, b = offsets.k_fwd, offsets.block_size
    call = _Caller(model, offsets.offsets)

    def frontier(t_s: int, t: int) -> int:
        reach = t + (k if opts.use_multi_forward else 1)
        end = min(t_s + b - 1, reach, limit - 1)
        if state.seq[-1] == EOS and len(state.seq) > t_s:
            end = min(end, len(state.seq) - 1)  # nothing follows a drafted EOS
        return end

    state = DecodeState(list(prompt), p_len, p_len, 0, [1.0] * p_len, [0] * p_len, np.random.default_rng(opts.seed))
    view = call([state.seq])[0]
    state.t_e = frontier(p_len, p_len - 1)
    trace: list[dict] = []
    stall = 0
    done = False
    it = 0
    stale = False  # buffer changed since ``view`` was computed
    while state.t_s < limit and not done:
        if stale:
            view = call([state.seq])[0]
            stale = False
        t_s = state.t_s
        state.resize(state.t_e + 1)
        dists = [_ensemble_at(view, state, j, offsets) for j in range(t_s, state.t_e + 1)]
        prefix = state.seq[:t_s]
        if opts.use_verifier:
            tops = [_top(lp, opts.tree_topk) for lp in dists]
            tree = build_candidate_tree(tops, offsets.gamma, opts.node_budget)
            fill = [int(tok[0]) for tok, _ in tops]
            paths = [path + fill[len(path):] for path in tree.leaf_paths()] + [fill]
            cands = sorted({tuple(_cut_at_eos(c)) for c in paths})
            views = call([prefix + list(c) for c in cands])
            scores = []
            for c, v in zip(cands, views):
                s = [verification_score(v, j, tok, offsets) + contrastive_score(v, j, tok, offsets)
                     for j, tok in enumerate(c, start=t_s)]
                scores.append(float(np.mean(s)))
            best = int(np.argmax(scores))
            chosen, view = list(cands[best]), views[best]
            n_cands = len(cands)
        else:
            chosen = _cut_at_eos(int(np.argmax(lp)) for lp in dists)
            n_cands = 1
        t_e = t_s + len(chosen) - 1
        block = range(t_s, t_e + 1)
        state.resize(t_e + 1)
        for j in block:
            state.refinements[j] += 1
        if not opts.use_verifier:
            if offsets.backward_offsets or t_e > t_s:
                view = call([prefix + chosen])[0]
            else:
                # c rests on the next-token prediction from the accepted prefix,
                # already in ``view``; the refresh waits until a draft needs it
                stale = True
        state.seq = prefix + chosen
        t = t_e
        conf = [acceptance_probability(view, j, tok, offsets) for j, tok in zip(block, chosen)]
        for j, c in zip(block, conf):
            state.confidence[j] = c
        accepted, blocked, forced = 0, False, False
        for j in block:
            if state.refinements[j] < opts.min_refinements:
                blocked = True
                break
            if accept_token(state.confidence[j], state.rng):
                accepted += 1
                state.t_s += 1
                if state.seq[j] == EOS:
                    done = True
                    break
            else:
                break
        if accepted == 0 and not blocked:
            stall += 1
            if stall >= opts.max_stall:
                forced = True
                accepted = 1
                state.t_s += 1
                done = state.seq[t_s] == EOS
                stall = 0
        elif accepted:
            stall = 0
        trace.append({
            "iteration": it,
            "t_s": t_s - p_len,
            "t_e": t_e - p_len,
            "candidates_considered": n_cands,
            "chosen": chosen,
            "c": conf,
            "accepted_prefix_len": accepted,
            "forced": forced,
            "model_calls": call.calls,
        })
        it += 1
        state.t_e = frontier(state.t_s, t)
    out = state.seq[p_len : state.t_s]
    return DecodeResult(out, done, trace, call.calls, it)


def write_trace(result: DecodeResult, path: str | Path) -> Path:
    """JSON-lines trace, one record per iteration. ``t_s``/``t_e`` are 0-based
    output positions (prompt excluded)."""
    path = Path(path)
    with open(path, "w") as fh:
        for rec in result.trace:
            fh.write(json.dumps(rec) + "\n")
    return path


@torch.no_grad()
def greedy_decode(model, prompt: Sequence[int], max_len: int = 64) -> list[int]:
    """Plain next-token argmax decoding through the vanilla forward."""
    seq = [int(t) for t in prompt]
    p_len = len(seq)
    limit = min(p_len + max_len, model.max_seq_len)
    while len(seq) < limit:
        # same f32 log-softmax as the grid's next-token column, so ties break identically
        log_p = numerics.log_softmax(model.next_token_logits(torch.tensor([seq])))[0, -1]
        tok = int(np.argmax(log_p.numpy()))
        seq.append(tok)
        if tok == EOS:
            break
    return seq[p_len:]


# --------------------------------------------------------------- mock model


@dataclass
class MockOracle:
    """Stand-in model whose per-offset mode is the ground-truth token with
    probability ``alpha[d]`` (mass ``mode_mass``), else a random wrong token."""

    truth: list[int]
    alpha: dict[int, float] | float = 1.0
    vocab_size: int = 64
    seed: int = 0
    mode_mass: float = 0.9
    max_seq_len: int = 256
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def alpha_at(self, d: int) -> float:
        if isinstance(self.alpha, dict):
            return float(self.alpha.get(d, 0.0))
        return float(self.alpha)

    def forward_grid(self, tokens, offsets) -> PredictionGrid:
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.dim() == 1:
            tokens = tokens[None]
        offsets = tuple(sorted(set(offsets)))
        bsz, t = tokens.shape
        v = self.vocab_size
        pos = np.arange(t)[:, None] + np.array(offsets)[None, :]  # [T, D]
        truth = np.array(self.truth + [EOS])
        true_tok = truth[np.clip(pos, 0, len(truth) - 1)]
        true_tok = np.where(pos >= len(self.truth), EOS, true_tok)
        alpha = np.array([self.alpha_at(d) for d in offsets])
        hit = self.rng.random((bsz, t, len(offsets))) < alpha
        wrong = (true_tok[None] + self.rng.integers(1, v, size=(bsz, t, len(offsets)))) % v
        mode = np.where(hit, true_tok[None], wrong)
        low = (1.0 - self.mode_mass) / (v - 1)
        probs = np.full((bsz, t, len(offsets), v), low)
        np.put_along_axis(probs, mode[..., None], self.mode_mass, axis=-1)
        available = (pos >= 0) & (pos < self.max_seq_len)
        return PredictionGrid(torch.from_numpy(np.log(probs)), torch.from_numpy(available), offsets)


def mock_grid(oracle: MockOracle, y_partial: Sequence[int], offsets: Sequence[int]) -> PredictionGrid:
    return oracle.forward_grid([list(y_partial)], offsets)
