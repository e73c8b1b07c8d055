"""Command-line driver.

Every command reads an optional JSON config (``--config``) whose keys are
the long flag names with dashes replaced by underscores; flags given on the
command line override it. Results go to ``--out`` as CSV (stdout when
absent) with a JSON sidecar ``<out>.meta.json`` echoing the effective
configuration. Exit codes: 0 success, 1 internal error, 2 bad input.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
import traceback
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .analysis import (
    BENCH_COLUMNS,
    average_flow,
    bench_rows,
    flops_estimate,
    flops_rows,
    flow_rows,
    information_flow,
    metric_rows_csv,
    redundancy,
    redundancy_rows,
    table_csv,
    wall_clock_bench,
)
from .checkpoint import load_model, save_model
from .harness import (
    PPL_COLUMNS,
    SWEEP_COLUMNS,
    EvalSpec,
    load_corpus,
    load_prompt_label_items,
    perplexity_with_context,
    sweep_keytoken,
    sweep_perplexity,
    sweep_prompt_label,
)
from .model import ModelConfig, forward_pruned, init_model
from .pruning import AGGREGATORS, CRITERIA, DEFAULT_RATIOS, linear_schedule

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2
SWEEP_TASKS = ("keytoken", "ppl", "promptlabel")
TAPS = ("block", "scan")


class InputError(ValueError):
    """Bad configuration or input data (exit code 2)."""


# ---------------------------------------------------------------------------
# value parsing shared by flags and JSON config


def _integer(value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, str)):
        raise InputError(f"expected an integer, got {value!r}")
    try:
        return int(value)
    except ValueError:
        raise InputError(f"expected an integer, got {value!r}") from None


def _positive_int(value: Any) -> int:
    out = _integer(value)
    if out < 1:
        raise InputError(f"expected a positive integer, got {out}")
    return out


def _count(value: Any) -> int:
    out = _integer(value)
    if out < 0:
        raise InputError(f"expected a non-negative integer, got {out}")
    return out


def _ratio(value: Any) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise InputError(f"expected a number, got {value!r}") from None
    if not 0 < out <= 1:
        raise InputError(f"ratio must lie in (0, 1], got {out}")
    return out


def _choice(options: tuple[str, ...]) -> Callable[[Any], str]:
    def parse(value: Any) -> str:
        if value not in options:
            raise InputError(f"expected one of {', '.join(options)}, got {value!r}")
        return value

    return parse


def _flag(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    raise InputError(f"expected true or false, got {value!r}")


def _path(value: Any) -> str:
    if not isinstance(value, str) or not value:
        raise InputError(f"expected a path, got {value!r}")
    return value


def _optional(parse: Callable[[Any], Any]) -> Callable[[Any], Any]:
    return lambda value: None if value is None else parse(value)


def _list(parse: Callable[[Any], Any]) -> Callable[[Any], list]:
    def parse_list(value: Any) -> list:
        items = value.split(",") if isinstance(value, str) else value
        if not isinstance(items, list) or not items:
            raise InputError(f"expected a non-empty list, got {value!r}")
        return [parse(v.strip() if isinstance(v, str) else v) for v in items]

    return parse_list


def _cli_type(parse: Callable[[Any], Any]) -> Callable[[str], Any]:
    def convert(text: str) -> Any:
        try:
            return parse(text)
        except InputError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    return convert


# name -> (parser, default, help); a default of REQUIRED must come from flag or config
REQUIRED = object()

COMMON = {
    "seed": (_count, 0, "seed for every random choice"),
    "out": (_optional(_path), None, "output path (CSV; checkpoint for init)"),
    "threads": (_optional(_positive_int), None, "BLAS/OpenMP thread limit"),
}
PRUNING = {
    "criterion": (_choice(CRITERIA), "influence", "token selection rule"),
    "ratio": (_ratio, 0.1, "fraction of tokens kept after the last layer"),
    "aggregator": (_choice(AGGREGATORS), "max", "channel reduction of influence"),
    "exclude_bias": (_flag, True, "drop the step-size bias from decay products while scoring"),
    "chunk_size": (_optional(_positive_int), None, "score and prune the prompt in chunks of this size"),
}
ARCH = {
    "n_layers": (_positive_int, 4, "layers"),
    "d_model": (_positive_int, 64, "residual width"),
    "expand": (_positive_int, 2, "inner width multiplier"),
    "d_state": (_positive_int, 16, "state size per channel"),
    "d_conv": (_count, 4, "causal conv width (0 disables)"),
    "vocab_size": (_positive_int, 258, "vocabulary size"),
    "dt_rank": (_count, 0, "step-size projection rank (0 = d_model / 16 rounded up)"),
}
MODEL = {"model": (_path, REQUIRED, "checkpoint path")}
CORPUS = {"corpus": (_path, REQUIRED, "directory of text files or .ids files")}
PPL = {
    "snippet_len": (_positive_int, 100, "scored tokens per document"),
    "context_lengths": (_list(_positive_int), [512, 1024, 1536, 2048], "comma-separated context lengths"),
    "n_docs": (_optional(_positive_int), None, "documents per point (default: all eligible)"),
}

COMMANDS: dict[str, tuple[str, dict]] = {
    "init": ("create a randomly initialized checkpoint", {**COMMON, **ARCH}),
    "ppl": ("perplexity of a fixed snippet versus context length", {**COMMON, **PRUNING, **MODEL, **CORPUS, **PPL}),
    "sweep": ("criterion x keep-ratio grid with FLOPs", {
        **COMMON,
        "aggregator": PRUNING["aggregator"],
        "exclude_bias": PRUNING["exclude_bias"],
        "chunk_size": PRUNING["chunk_size"],
        "task": (_choice(SWEEP_TASKS), "keytoken", "keytoken (built-in), ppl (corpus) or promptlabel (items)"),
        "criteria": (_list(_choice(CRITERIA)), list(CRITERIA), "comma-separated criteria"),
        "ratios": (_list(_ratio), list(DEFAULT_RATIOS), "comma-separated keep ratios"),
        "model": (_optional(_path), None, "checkpoint (ppl and promptlabel tasks)"),
        "corpus": (_optional(_path), None, "corpus (ppl task)"),
        "items": (_optional(_path), None, "JSON-lines prompt/label items (promptlabel task)"),
        "length_normalize": (_flag, False, "divide label log-likelihood by label length"),
        "n_items": (_positive_int, 30, "key-token tasks per cell"),
        "length": (_positive_int, 64, "key-token sequence length"),
        "n_keys": (_count, 3, "keys per key-token task"),
        "span": (_positive_int, 2, "adjacent copies of each key"),
        **PPL,
    }),
    "analyze": ("adjacent-token redundancy and information flow per layer", {
        **COMMON, **PRUNING, **MODEL, **CORPUS,
        "ratio": (_ratio, 1.0, PRUNING["ratio"][2]),
        "length": (_positive_int, 1000, "documents are truncated to this many tokens; shorter ones are skipped"),
        "n_bins": (_positive_int, 5, "position bins for information flow"),
        "tap": (_choice(TAPS), "block", "redundancy tap: block output or raw scan output"),
        "n_docs": PPL["n_docs"],
    }),
    "flops": ("analytic FLOPs of a pruned forward", {
        **COMMON, **ARCH,
        "ratio": PRUNING["ratio"],
        "model": (_optional(_path), None, "take the architecture from this checkpoint"),
        "length": (_positive_int, 4096, "prompt length"),
        "tail": (_count, 0, "unprunable tokens after the prompt"),
    }),
    "bench": ("wall-clock latency of dense versus pruned prefill", {
        **COMMON, **ARCH, **PRUNING,
        "model": (_optional(_path), None, "checkpoint (default: random model from the architecture flags)"),
        "lengths": (_list(_positive_int), [1024, 2048, 4096], "comma-separated input lengths"),
        "repetitions": (_positive_int, 3, "timed runs per point"),
        "warmup": (_count, 1, "untimed runs per point"),
    }),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmprune", description="Selective-scan inference with token pruning.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, fields) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=str, default=None, help="JSON file of option values")
        for field, (parse, default, field_help) in fields.items():
            flag = "--" + field.replace("_", "-")
            shown = "required" if default is REQUIRED else f"default: {default}"
            if parse is _flag:
                p.add_argument(flag, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS,
                               help=f"{field_help} ({shown})")
            else:
                p.add_argument(flag, type=_cli_type(parse), default=argparse.SUPPRESS, help=f"{field_help} ({shown})")
    return parser


def resolve(command: str, flags: dict[str, Any], config_path: str | None) -> dict[str, Any]:
    """Effective options: defaults, then the JSON config, then flags."""
    fields = COMMANDS[command][1]
    values = {k: d for k, (_, d, _) in fields.items()}
    if config_path is not None:
        try:
            loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InputError(f"config not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"config {config_path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise InputError("config must be a JSON object")
        unknown = sorted(set(loaded) - set(fields))
        if unknown:
            raise InputError(f"unknown config keys for {command}: {', '.join(unknown)}")
        for key, value in loaded.items():
            try:
                values[key] = fields[key][0](value)
            except InputError as exc:
                raise InputError(f"config key {key}: {exc}") from None
    values.update(flags)
    missing = [k for k, v in values.items() if v is REQUIRED]
    if missing:
        raise InputError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return values


# ---------------------------------------------------------------------------
# commands; each returns (csv text, extra metadata)


def _arch(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(**{k: cfg[k] for k in ARCH})
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _eval_spec(cfg: dict, **overrides) -> EvalSpec:
    keys = ("snippet_len", "context_lengths", "criterion", "ratio", "aggregator", "exclude_bias",
            "chunk_size", "seed", "n_docs", "length_normalize")
    args = {k: cfg[k] for k in keys if k in cfg}
    args.update(overrides)
    try:
        return EvalSpec(**args)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def cmd_init(cfg: dict) -> tuple[str | None, dict]:
    if cfg["out"] is None:
        raise InputError("init needs --out for the checkpoint")
    model = init_model(_arch(cfg), seed=cfg["seed"])
    save_model(model, cfg["out"])
    return None, {"parameters": int(sum(t.size for t in model.tensors().values()))}


def cmd_ppl(cfg: dict) -> tuple[str, dict]:
    model = load_model(cfg["model"])
    docs = load_corpus(cfg["corpus"])
    result = perplexity_with_context(model, docs, _eval_spec(cfg))
    return table_csv(PPL_COLUMNS, result.rows), {
        "skipped_documents": result.skipped,
        "snippet_sha256": {str(c): d for c, d in result.snippet_digest.items()},
    }


def cmd_sweep(cfg: dict) -> tuple[str, dict]:
    task = cfg["task"]
    if task == "keytoken":
        if cfg["n_keys"] * cfg["span"] >= cfg["length"]:
            raise InputError("key spans must leave room for at least one filler token")
        seeds = [cfg["seed"] + i for i in range(cfg["n_items"])]
        rows = sweep_keytoken(cfg["criteria"], cfg["ratios"], seeds, length=cfg["length"],
                              n_keys=cfg["n_keys"], span=cfg["span"], aggregator=cfg["aggregator"])
        return table_csv(SWEEP_COLUMNS, rows), {"seeds": seeds}
    if cfg["model"] is None:
        raise InputError(f"sweep task {task} needs --model")
    model = load_model(cfg["model"])
    spec = _eval_spec(cfg)
    if task == "ppl":
        if cfg["corpus"] is None:
            raise InputError("sweep task ppl needs --corpus")
        rows = sweep_perplexity(model, load_corpus(cfg["corpus"]), spec, cfg["criteria"], cfg["ratios"])
    else:
        if cfg["items"] is None:
            raise InputError("sweep task promptlabel needs --items")
        rows = sweep_prompt_label(model, load_prompt_label_items(cfg["items"]), spec, cfg["criteria"], cfg["ratios"])
    return table_csv(SWEEP_COLUMNS, rows), {}


def analysis_documents(docs: list[np.ndarray], length: int, n_docs: int | None, seed: int) -> tuple[list[np.ndarray], int]:
    """Documents truncated to ``length`` in seeded order, and how many were too short."""
    order = np.random.default_rng(seed).permutation(len(docs))
    kept = [docs[i][:length] for i in order if len(docs[i]) >= length]
    skipped = len(docs) - len(kept)
    return (kept if n_docs is None else kept[:n_docs]), skipped


def cmd_analyze(cfg: dict) -> tuple[str, dict]:
    model = load_model(cfg["model"])
    docs, skipped = analysis_documents(load_corpus(cfg["corpus"]), cfg["length"], cfg["n_docs"], cfg["seed"])
    if not docs:
        raise InputError(f"no document has at least {cfg['length']} tokens")
    if cfg["length"] < 2:
        raise InputError("analysis needs documents of at least two tokens")
    cos = redundancy(model, docs, tap=cfg["tap"])
    schedule = linear_schedule(cfg["length"], model.config.n_layers, cfg["ratio"])
    profiles = [
        information_flow(
            forward_pruned(model, doc, schedule, cfg["criterion"], aggregator=cfg["aggregator"],
                           exclude_bias=cfg["exclude_bias"], chunk_size=cfg["chunk_size"], seed=cfg["seed"],
                           keep_materials=True),
            n_bins=cfg["n_bins"], aggregator=cfg["aggregator"], length=cfg["length"],
        )
        for doc in docs
    ]
    rows = redundancy_rows(cos) + flow_rows(average_flow(profiles))
    return metric_rows_csv(rows), {"documents": len(docs), "skipped_documents": skipped}


def cmd_flops(cfg: dict) -> tuple[str, dict]:
    config = load_model(cfg["model"]).config if cfg["model"] else _arch(cfg)
    schedule = linear_schedule(cfg["length"], config.n_layers, cfg["ratio"])
    report = flops_estimate(config, schedule.keep, cfg["length"], cfg["tail"])
    dense = flops_estimate(config, None, cfg["length"], cfg["tail"])
    return metric_rows_csv(flops_rows(config, report)), {
        "model_config": config.to_strings(),
        "dense_total": dense.total,
        "ratio_to_dense": report.total / dense.total,
    }


def cmd_bench(cfg: dict) -> tuple[str, dict]:
    model = load_model(cfg["model"]) if cfg["model"] else init_model(_arch(cfg), seed=cfg["seed"])
    rows = wall_clock_bench(model, cfg["lengths"], cfg["ratio"], repetitions=cfg["repetitions"],
                            warmup=cfg["warmup"], criterion=cfg["criterion"], seed=cfg["seed"],
                            aggregator=cfg["aggregator"], exclude_bias=cfg["exclude_bias"],
                            chunk_size=cfg["chunk_size"])
    return table_csv(BENCH_COLUMNS, bench_rows(rows, cfg["ratio"], cfg["criterion"])), {
        "model_config": model.config.to_strings(),
        "note": "timing columns are measurements and vary between runs",
    }


HANDLERS = {
    "init": cmd_init,
    "ppl": cmd_ppl,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "flops": cmd_flops,
    "bench": cmd_bench,
}


def sidecar_path(out: str) -> Path:
    return Path(out + ".meta.json")


def run(command: str, cfg: dict) -> None:
    limit = contextlib.nullcontext()
    if cfg["threads"] is not None:
        from threadpoolctl import threadpool_limits

        limit = threadpool_limits(limits=cfg["threads"])
    with limit:
        text, extra = HANDLERS[command](cfg)
    meta = {"command": command, "version": __version__, "seed": cfg["seed"], "config": cfg, **extra}
    if cfg["out"] is None:
        sys.stdout.write(text or "")
        return
    if text is not None:
        Path(cfg["out"]).write_text(text, encoding="utf-8", newline="")
    sidecar_path(cfg["out"]).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# checkpoint, schedule and JSON errors are ValueErrors; missing files are OSErrors
INPUT_ERRORS = (ValueError, OSError)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        cfg = resolve(args.command, flags, args.config)
        run(args.command, cfg)
    except INPUT_ERRORS as exc:
        print(f"ssmprune {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
