"""Command-line entry point: ``promptcraft <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import numerics as nx
from . import workflow
from .config import ConfigError, PipelineConfig, load_config
from .data.pipeline import compute_stats, load_pairs, load_raw, write_jsonl
from .errors import PromptCraftError
from .evaluation import build_report, composite_judge, emit_plot, evaluate, generate_rewrites, winrate, write_report
from .lm.checkpoint import load_checkpoint
from .lm.sampling import SamplerConfig, sample
from .lm.tokenizer import EOS, decode
from .reward import RewardModel
from .sft import gradcheck_sft, query_ids

log = logging.getLogger("promptcraft")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are 1 here
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _global_flags() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key=value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for every stage")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: runs)")
    common.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="promptcraft", description="Prompt rewriting with SFT, reward models and PPO.",
                     parents=[common])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    data = sub.add_parser("data", help="synthesize, build and inspect datasets")
    data_sub = data.add_subparsers(dest="action", parser_class=_Parser)
    p = data_sub.add_parser("synth", parents=[common], help="write a synthetic raw corpus")
    p.add_argument("--n", type=int, default=None, help="number of records")
    p = data_sub.add_parser("build", parents=[common], help="raw corpus -> filtered pairs and test prompts")
    p.add_argument("--raw", default=None)
    p = data_sub.add_parser("stats", parents=[common], help="dataset statistics table")
    p.add_argument("--pairs", default=None)

    train = sub.add_parser("train", help="train a stage")
    train_sub = train.add_subparsers(dest="stage", parser_class=_Parser)
    p = train_sub.add_parser("sft", parents=[common])
    p.add_argument("--pairs", default=None)
    p = train_sub.add_parser("rm", parents=[common])
    p.add_argument("--kind", choices=("ps", "aes"), required=True)
    p.add_argument("--pairs", default=None)
    p.add_argument("--backbone", default=None, help="checkpoint to initialize from (default: the SFT checkpoint)")
    p.add_argument("--no-augment", action="store_true")
    p = train_sub.add_parser("ppo", parents=[common])
    p.add_argument("--reward", choices=workflow.REWARD_KINDS, default="combined")
    _model_inputs(p)

    p = sub.add_parser("eval", parents=[common], help="score rewriters on the test prompts")
    p.add_argument("--model", action="append", default=None, metavar="NAME=CKPT",
                   help="rewriter to score (repeatable; default: SFT and PPO under --out)")
    p.add_argument("--test", default=None)
    p.add_argument("--no-original", action="store_true", help="skip the identity baseline")

    p = sub.add_parser("winrate", parents=[common], help="paired comparison under the composite oracle judge")
    p.add_argument("--a", default=None, help="checkpoint or 'original' (default: PPO)")
    p.add_argument("--b", default=None, help="checkpoint or 'original' (default: SFT)")
    p.add_argument("--test", default=None)

    p = sub.add_parser("ablate", parents=[common], help="reward-variant trajectories and plot")
    _model_inputs(p)
    p.add_argument("--variants", default=None, help="comma-separated subset of the four variants")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the SFT loss gradient")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--tol", type=float, default=1e-3)

    p = sub.add_parser("sample", parents=[common], help="rewrite one prompt")
    p.add_argument("--model", default=None, help="checkpoint (default: PPO, else SFT, under --out)")
    p.add_argument("--prompt", required=True)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--top-p", type=float, default=0.9)
    p.add_argument("--max-new-tokens", type=int, default=None)
    p.add_argument("--n", type=int, default=1)
    return parser


def _model_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sft", default=None, help="SFT checkpoint")
    p.add_argument("--rm-ps", default=None)
    p.add_argument("--rm-aes", default=None)
    p.add_argument("--prompts", default=None, help="pairs file whose lows form the prompt pool")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _path(arg: str | None, out: Path, default: str) -> Path:
    return Path(arg) if arg else out / default


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def cmd_data(args, cfg: PipelineConfig, out: Path) -> int:
    if args.action == "synth":
        out.mkdir(parents=True, exist_ok=True)
        records = workflow.synth_raw(cfg, out / "raw.jsonl", args.n)
        print(f"wrote {len(records)} records to {out / 'raw.jsonl'}")
    elif args.action == "build":
        raw = load_raw(_require(_path(args.raw, out, "raw.jsonl"), "raw corpus"))
        result = workflow.build(cfg, raw, out)
        for r in result.reports:
            print(f"{r.name:<14} kept {r.kept:>6} removed {r.removed:>6}")
        print(f"train pairs {len(result.train)}, test prompts {len(result.test)}")
    elif args.action == "stats":
        pairs = load_pairs(_require(_path(args.pairs, out, "train.jsonl"), "pairs file"))
        stats = compute_stats(pairs)
        print(stats.format_table())
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.json").write_text(json.dumps(stats.to_json(), indent=2))
    else:
        raise UsageError("data: choose one of synth, build, stats")
    return 0


def cmd_train(args, cfg: PipelineConfig, out: Path) -> int:
    if args.stage == "sft":
        pairs = load_pairs(_require(_path(args.pairs, out, "train.jsonl"), "pairs file"))
        result = workflow.sft(cfg, pairs, out)
        print(f"final loss {result.history[-1][2]:.4f}; wrote {result.checkpoint}")
    elif args.stage == "rm":
        pairs = load_pairs(_require(_path(args.pairs, out, "train.jsonl"), "pairs file"))
        backbone = workflow.load_params(_require(_path(args.backbone, out, "sft.ckpt"), "backbone checkpoint"))
        result = workflow.reward_model(cfg, args.kind, pairs, backbone, out, augment=not args.no_augment)
        print(f"rm[{args.kind}] held-out mse {result.val_mse:.4f} (mean baseline {result.baseline_mse:.4f}), "
              f"pearson {result.pearson:.3f}; wrote {result.checkpoint}")
    elif args.stage == "ppo":
        sft_params, prompts, rm_ps, rm_aes = _ppo_inputs(args, out, args.reward)
        provider = workflow.make_provider(args.reward, cfg, rm_ps, rm_aes)
        result = workflow.ppo(cfg, sft_params, prompts, provider, out)
        last = result.metrics[-1] if result.metrics else {}
        print(f"ppo finished: {len(result.metrics)} steps, last mean reward {last.get('mean_reward', float('nan')):.4f}, "
              f"beta {result.kl_state.beta:.4f}; wrote {result.checkpoint}")
    else:
        raise UsageError("train: choose one of sft, rm, ppo")
    return 0


def _ppo_inputs(args, out: Path, reward: str):
    sft_params = workflow.load_params(_require(_path(args.sft, out, "sft.ckpt"), "SFT checkpoint"))
    pairs = load_pairs(_require(_path(args.prompts, out, "train.jsonl"), "prompt pool"))
    prompts = [p.low for p in pairs]
    rm_ps = rm_aes = None
    if reward in ("ps", "combined", "all"):
        rm_ps = RewardModel.load(_require(_path(args.rm_ps, out, "rm_ps.ckpt"), "ps reward model"))
    if reward in ("aes", "combined", "all"):
        rm_aes = RewardModel.load(_require(_path(args.rm_aes, out, "rm_aes.ckpt"), "aes reward model"))
    return sft_params, prompts, rm_ps, rm_aes


def _default_models(out: Path) -> list[tuple[str, Path]]:
    found = [(name, out / f) for name, f in (("sft", "sft.ckpt"), ("ppo", "ppo.ckpt")) if (out / f).exists()]
    if not found:
        raise FileNotFoundError(f"no sft.ckpt or ppo.ckpt under {out}; pass --model NAME=CKPT")
    return found


def cmd_eval(args, cfg: PipelineConfig, out: Path) -> int:
    prompts = workflow.load_test_prompts(_require(_path(args.test, out, "test.jsonl"), "test prompts"))
    if not prompts:
        raise ValueError("empty test set")
    models = []
    for spec in args.model or []:
        if "=" not in spec:
            raise UsageError(f"--model expects NAME=CKPT, got {spec!r}")
        name, path = spec.split("=", 1)
        models.append((name, _require(Path(path), "checkpoint")))
    if not models:
        models = _default_models(out)
    oracle = cfg.oracle.noiseless()
    rows = []
    if not args.no_original:
        rows.append(evaluate(None, prompts, oracle, cfg.eval.seeds(), "Original"))
    for name, path in models:
        rows.append(evaluate(load_checkpoint(path).params, prompts, oracle, cfg.eval.seeds(), name,
                             cfg.eval.max_new_tokens))
    report = build_report(rows)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out)
    for r in rows:
        write_jsonl(out / f"outputs_{r.method}.jsonl", ({"x": x, "y": y} for x, y in zip(prompts, r.outputs)))
    print(report.format_table())
    return 0


def _rewrites(spec: str, prompts: list[str], cfg: PipelineConfig) -> list[str]:
    if spec == "original":
        return list(prompts)
    return generate_rewrites(load_checkpoint(_require(Path(spec), "checkpoint")).params, prompts,
                             cfg.eval.max_new_tokens)


def cmd_winrate(args, cfg: PipelineConfig, out: Path) -> int:
    prompts = workflow.load_test_prompts(_require(_path(args.test, out, "test.jsonl"), "test prompts"))
    a = args.a or str(out / "ppo.ckpt")
    b = args.b or str(out / "sft.ckpt")
    result = winrate(prompts, _rewrites(a, prompts, cfg), _rewrites(b, prompts, cfg),
                     composite_judge(cfg.composite.alpha, cfg.oracle.noiseless()), cfg.eval.tie_eps)
    payload = {"a": a, "b": b, **result.to_json()}
    out.mkdir(parents=True, exist_ok=True)
    (out / "winrate.json").write_text(json.dumps(payload, indent=2))
    print(json.dumps(payload, indent=2))
    return 0


def cmd_ablate(args, cfg: PipelineConfig, out: Path) -> int:
    from .evaluation import VARIANTS

    variants = [v.strip() for v in args.variants.split(",")] if args.variants else list(VARIANTS)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; choose from {list(VARIANTS)}")
    needs = {"ps-only": "ps", "aes-only": "aes", "combined": "all"}
    need_ps = any(needs.get(v) in ("ps", "all") for v in variants)
    need_aes = any(needs.get(v) in ("aes", "all") for v in variants)
    reward = "all" if need_ps and need_aes else "ps" if need_ps else "aes" if need_aes else "direct"
    sft_params, prompts, rm_ps, rm_aes = _ppo_inputs(args, out, reward)
    test_path = out / "test.jsonl"
    pool = workflow.load_test_prompts(test_path) if test_path.exists() else prompts
    probe = pool[: cfg.eval.probe_size]
    log_ = workflow.ablation(cfg, sft_params, prompts, probe, rm_ps, rm_aes, out / "ablation", variants)
    emit_plot(log_, out / "ablation" / "ablation.svg")
    for v in log_.variants():
        for p in log_.series(v):
            print(f"{v:<14} step {p.step:>6}  aes {p.aes:.4f}  pick {p.pick:.4f}")
    return 0


def cmd_gradcheck(args, cfg: PipelineConfig, out: Path) -> int:
    report = gradcheck_sft(args.layers, args.d_model, args.heads, seed=cfg.sft.seed)
    print(report.format())
    ok = report.passed(args.tol)
    print(f"max relative error {report.max_rel_error:.3e} ({'PASS' if ok else 'FAIL'} at tol {args.tol:g})")
    return 0 if ok else 2


def cmd_sample(args, cfg: PipelineConfig, out: Path) -> int:
    if args.model:
        path = _require(Path(args.model), "checkpoint")
    else:
        path = out / "ppo.ckpt" if (out / "ppo.ckpt").exists() else _require(out / "sft.ckpt", "checkpoint")
    params = load_checkpoint(path).params
    max_new = args.max_new_tokens or cfg.eval.max_new_tokens
    for i in range(args.n):
        s = sample(params, query_ids(args.prompt), SamplerConfig(args.temperature, args.top_p, max_new, cfg.ppo.seed + i))
        print(decode([t for t in s.ids if t != EOS]))
    return 0


COMMANDS = {"data": cmd_data, "train": cmd_train, "eval": cmd_eval, "winrate": cmd_winrate, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck, "sample": cmd_sample}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        if args.command == "data" and getattr(args, "action", None) is None:
            raise UsageError("data: choose one of synth, build, stats")
        if args.command == "train" and getattr(args, "stage", None) is None:
            raise UsageError("train: choose one of sft, rm, ppo")
        cfg = load_config(getattr(args, "config", None), getattr(args, "set", None) or ())
        if getattr(args, "seed", None) is not None:
            cfg = cfg.with_seed(args.seed)
    except (UsageError, ConfigError) as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1

    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    nx.configure_determinism()
    out = Path(getattr(args, "out", "runs"))
    try:
        return COMMANDS[args.command](args, cfg, out)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except (PromptCraftError, OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"promptcraft: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())


__all__ = ["main", "build_parser"]
