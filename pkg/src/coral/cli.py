"""``coral`` command line: train / decode / bench / analyze.

Every flag can also be given in a JSON file passed with ``--config`` (keys are
the flag names with dashes replaced by underscores); flags win on conflict.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bench import VARIANTS, analyze_offsets, run_benchmark
from .corpus import TASKS, CorruptionSpec, detokenize, encode_prompt, gen_task
from .decoder import DecodeOptions, decode, write_trace
from .model import CoralTransformer, ModelConfig, OffsetConfig
from .trainer import load_checkpoint, save_checkpoint, toy_stages, train_pipeline

log = logging.getLogger("coral")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\nhint: run '{self.prog} --help' for the list of flags")


DEFAULTS = {
    "seed": 0,
    "task": "copy",
    "samples": 4000,
    "eval_samples": 100,
    "length_min": 4,
    "length_max": 12,
    "pretrain_epochs": 12,
    "stage1_epochs": 3,
    "stage2a_epochs": 3,
    "stage2b_epochs": 16,
    "batch_size": 32,
    "d_model": 128,
    "n_layers": 4,
    "n_heads": 4,
    "max_seq_len": 96,
    "k_fwd": 4,
    "k_bwd": 8,
    "granularity": 1,
    "ratio": 0.25,
    "block_size": 64,
    "epsilon": 0.2,
    "max_len": 64,
    "min_refinements": 0,
    "node_budget": 64,
    "variants": ",".join(VARIANTS),
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--config", help="JSON file with defaults for any flag")
    p.add_argument("--out", help="output path (checkpoint dir, trace, report or CSV)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _decode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--block-size", type=int, help="decoding block size b (default 64)")
    p.add_argument("--epsilon", type=float, help="acceptance threshold (default 0.2)")
    p.add_argument("--max-len", type=int, help="maximum output tokens (default 64)")
    p.add_argument("--min-refinements", type=int, help="minimum block residency per position (default 0)")
    p.add_argument("--node-budget", type=int, help="candidate tree node budget (default 64)")
    p.add_argument("--no-verifier", action="store_true", default=None, help="take the top path, skip verification")
    p.add_argument("--no-multi-forward", action="store_true", default=None,
                   help="cap the block at the next-token frontier")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coral", description="Order-agnostic multi-offset LM: train, decode, benchmark.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    tr = sub.add_parser("train", help="run the staged training pipeline and write a checkpoint")
    _common(tr)
    tr.add_argument("--task", choices=TASKS, help="synthetic task (default copy)")
    tr.add_argument("--samples", type=int, help="training samples (default 4000)")
    tr.add_argument("--length-min", type=int, help="min letters/operands (default 4)")
    tr.add_argument("--length-max", type=int, help="max letters/operands (default 12)")
    tr.add_argument("--pretrain-epochs", type=int, help="next-token base pretraining epochs (default 12)")
    tr.add_argument("--stage1-epochs", type=int, help="last-layer stage epochs (default 3)")
    tr.add_argument("--stage2a-epochs", type=int, help="all-but-last stage epochs (default 3)")
    tr.add_argument("--stage2b-epochs", type=int, help="full fine-tuning epochs (default 16)")
    tr.add_argument("--batch-size", type=int, help="batch size (default 32)")
    tr.add_argument("--d-model", type=int, help="model width (default 128)")
    tr.add_argument("--n-layers", type=int, help="layers (default 4)")
    tr.add_argument("--n-heads", type=int, help="attention heads (default 4)")
    tr.add_argument("--max-seq-len", type=int, help="maximum sequence length (default 96)")
    tr.add_argument("--k-fwd", type=int, help="forward window (default 4)")
    tr.add_argument("--k-bwd", type=int, help="backward window (default 8)")
    tr.add_argument("--granularity", type=int, help="corruption patch size (default 1)")
    tr.add_argument("--ratio", type=float, help="corruption ratio (default 0.25)")

    de = sub.add_parser("decode", help="decode one prompt with a checkpoint")
    _common(de)
    de.add_argument("--ckpt", help="checkpoint directory")
    de.add_argument("--prompt", help="prompt text, e.g. 'abc' or '12+30+70'")
    _decode_flags(de)

    be = sub.add_parser("bench", help="compare decoding variants on held-out task data")
    _common(be)
    be.add_argument("--ckpt", help="checkpoint directory")
    be.add_argument("--task", choices=TASKS, help="synthetic task (default copy)")
    be.add_argument("--variants", help=f"comma list from {','.join(VARIANTS)}")
    be.add_argument("--eval-samples", type=int, help="held-out samples (default 100)")
    be.add_argument("--length-min", type=int, help="min letters/operands (default 4)")
    be.add_argument("--length-max", type=int, help="max letters/operands (default 12)")
    _decode_flags(be)

    an = sub.add_parser("analyze", help="per-offset loss/top-k accuracy table as CSV")
    _common(an)
    an.add_argument("--ckpt", help="checkpoint directory")
    an.add_argument("--task", choices=TASKS, help="synthetic task (default copy)")
    an.add_argument("--eval-samples", type=int, help="held-out samples (default 100)")
    an.add_argument("--length-min", type=int, help="min letters/operands (default 4)")
    an.add_argument("--length-max", type=int, help="max letters/operands (default 12)")
    an.add_argument("--granularity", type=int, help="corruption patch size (default 1)")
    an.add_argument("--ratio", type=float, help="corruption ratio (default 0.25)")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(file_cfg) - set(vars(args)) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    cfg.update({k: v for k, v in vars(args).items() if v is not None and k != "config"})
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    for k in keys:
        if not cfg.get(k):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _check_ckpt(cfg: dict) -> None:
    _require(cfg, "ckpt")
    if not (Path(cfg["ckpt"]) / "manifest.json").exists():
        raise UsageError(f"no checkpoint at {cfg['ckpt']}")


def _decode_options(cfg: dict) -> DecodeOptions:
    return DecodeOptions(
        use_verifier=not cfg.get("no_verifier"),
        use_multi_forward=not cfg.get("no_multi_forward"),
        max_len=cfg["max_len"],
        min_refinements=cfg["min_refinements"],
        node_budget=cfg["node_budget"],
        seed=cfg["seed"],
    )


def _offsets_from(model: CoralTransformer, cfg: dict) -> OffsetConfig:
    stored = model.offset_config.to_dict()
    stored.update(block_size=cfg["block_size"], epsilon=cfg["epsilon"])
    return OffsetConfig.from_dict(stored)


def cmd_train(cfg: dict) -> int:
    _require(cfg, "out")
    if cfg["length_min"] > cfg["length_max"]:
        raise UsageError("--length-min exceeds --length-max")
    data = gen_task(cfg["task"], cfg["seed"], cfg["samples"], (cfg["length_min"], cfg["length_max"]))
    longest = max(len(s.sequence()) for s in data)
    mcfg = ModelConfig(d_model=cfg["d_model"], n_layers=cfg["n_layers"], n_heads=cfg["n_heads"],
                       max_seq_len=max(cfg["max_seq_len"], longest))
    ocfg = OffsetConfig(k_fwd=cfg["k_fwd"], k_bwd=cfg["k_bwd"], block_size=cfg["block_size"],
                        epsilon=cfg["epsilon"])
    corruption = CorruptionSpec(granularity=cfg["granularity"], ratio=cfg["ratio"])
    model = CoralTransformer(mcfg, ocfg, seed=cfg["seed"])
    stages = toy_stages(cfg["pretrain_epochs"], cfg["stage1_epochs"], cfg["stage2a_epochs"], cfg["stage2b_epochs"],
                        batch_size=cfg["batch_size"], corruption=corruption)
    results = train_pipeline(model, data, stages, seed=cfg["seed"])
    out = save_checkpoint(model, cfg["out"], step=sum(len(r.log) for r in results), seed=cfg["seed"],
                          extra={"task": cfg["task"]})
    with open(out / "metrics.jsonl", "w") as fh:
        for r in results:
            for rec in r.log:
                fh.write(json.dumps(rec) + "\n")
    print(f"checkpoint written to {out}")
    return 0


def cmd_decode(cfg: dict) -> int:
    _check_ckpt(cfg)
    _require(cfg, "prompt")
    model = load_checkpoint(cfg["ckpt"])
    prompt = encode_prompt(cfg["prompt"])
    res = decode(model, prompt, _offsets_from(model, cfg), _decode_options(cfg))
    trace = write_trace(res, cfg.get("out") or "decode_trace.jsonl")
    print(json.dumps({"output": detokenize(res.tokens), "tokens": res.tokens, "complete": res.complete,
                      "model_calls": res.model_calls, "trace": str(trace)}))
    return 0


def cmd_bench(cfg: dict) -> int:
    _check_ckpt(cfg)
    variants = [v.strip() for v in cfg["variants"].split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variants {bad}; choose from {list(VARIANTS)}")
    model = load_checkpoint(cfg["ckpt"])
    samples = gen_task(cfg["task"], cfg["seed"] + 10_000, cfg["eval_samples"], (cfg["length_min"], cfg["length_max"]))
    report = run_benchmark(model, samples, variants, _offsets_from(model, cfg), _decode_options(cfg), seed=cfg["seed"])
    text = report.to_json(cfg.get("out"))
    print(text)
    return 0


def cmd_analyze(cfg: dict) -> int:
    _check_ckpt(cfg)
    model = load_checkpoint(cfg["ckpt"])
    samples = gen_task(cfg["task"], cfg["seed"] + 20_000, cfg["eval_samples"], (cfg["length_min"], cfg["length_max"]))
    out = cfg.get("out") or "offset_analysis.csv"
    corruption = CorruptionSpec(granularity=cfg["granularity"], ratio=cfg["ratio"])
    table = analyze_offsets(model, samples, out, corruption=corruption, seed=cfg["seed"])
    for d in sorted(table):
        row = table[d]
        print(f"{d:+d}\tloss={row['loss']:.4f}\ttop1={row['topk'][0]:.3f}\ttop8={row['topk'][-1]:.3f}")
    print(f"csv written to {out}")
    return 0


COMMANDS = {"train": cmd_train, "decode": cmd_decode, "bench": cmd_bench, "analyze": cmd_analyze}


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        if not args.command:
            raise UsageError("missing subcommand (train, decode, bench, analyze)")
        cfg = resolve(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if cfg.get("verbose") else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    raise SystemExit(cli_main())


if __name__ == "__main__":
    main()
