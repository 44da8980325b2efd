"""Command-line entry point.

Subcommands: score, calibrate, index (chunk/build/search), run, sweep,
simulate.  Every command is deterministic given its flags, config file,
and seed; run-style commands write their resolved configuration next to
their outputs so any run can be reproduced from the provenance file alone.

Exit codes: 0 success, 2 usage/config error, 3 I/O or data error,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import calibration, reports, retrieval, simlab
from .calibration import CostParams
from .errors import ConfigError, DataError, InputError
from .gates import GATE_KINDS, GateConfig
from .pipeline import (
    DEFAULT_PROMPT_TEMPLATE,
    POLICIES,
    TraceReplayGenerator,
    run_dataset,
    run_record_to_dict,
)
from .retrieval import Retriever
from .traces import load_traces

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4


# ---------------------------------------------------------------------------
# Run configuration (declarative file + flag overrides)
# ---------------------------------------------------------------------------

DEFAULT_RUN_CONFIG: dict[str, Any] = {
    "seed": 0,
    "trace_path": None,
    "output_dir": None,
    "policy": "gate",
    "recheck": False,
    "prompt_template": DEFAULT_PROMPT_TEMPLATE,
    "gate": {
        "kind": "margin",
        "tau": None,
        "k": 20,
        "beta": 1.0,
        "n_samples": 3,
        "sample_temperature": 0.7,
        "recheck_stride": None,
    },
    "retrieval": {
        "index_path": None,
        "passages_path": None,
        "topk": 5,
        "ctx_budget": 256,
    },
    "cost": {
        "t_draft": 20,
        "t_ctx": 0,
        "e_out0": 0,
        "e_out1": 0,
        "per_token_cost": 0.0,
        "retrieval_overhead": 0.0,
    },
}


def _merge_config(base: dict, override: dict, path: str = "") -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in merged:
            raise ConfigError(f"unknown config field {where!r}")
        if isinstance(merged[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config field {where!r} must be an object")
            merged[key] = _merge_config(merged[key], value, where)
        else:
            merged[key] = value
    return merged


def _load_json(path: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise DataError(f"{path}: top-level JSON value must be an object")
    return obj


def _resolve_run_config(args: argparse.Namespace) -> dict:
    config = copy.deepcopy(DEFAULT_RUN_CONFIG)
    if args.config:
        config = _merge_config(config, _load_json(args.config))
    flag_overrides: dict[str, Any] = {}
    gate: dict[str, Any] = {}
    ret: dict[str, Any] = {}
    if args.trace is not None:
        flag_overrides["trace_path"] = args.trace
    if args.out_dir is not None:
        flag_overrides["output_dir"] = args.out_dir
    if args.seed is not None:
        flag_overrides["seed"] = args.seed
    if args.policy is not None:
        flag_overrides["policy"] = args.policy
    if args.recheck_stride is not None:
        flag_overrides["recheck"] = True
        gate["recheck_stride"] = args.recheck_stride
    if args.gate is not None:
        gate["kind"] = args.gate
    if args.tau is not None:
        gate["tau"] = args.tau
    if args.k is not None:
        gate["k"] = args.k
    if args.beta is not None:
        gate["beta"] = args.beta
    if args.n_samples is not None:
        gate["n_samples"] = args.n_samples
    if args.temperature is not None:
        gate["sample_temperature"] = args.temperature
    if args.index is not None:
        ret["index_path"] = args.index
    if args.passages is not None:
        ret["passages_path"] = args.passages
    if args.topk is not None:
        ret["topk"] = args.topk
    if args.ctx_budget is not None:
        ret["ctx_budget"] = args.ctx_budget
    if gate:
        flag_overrides["gate"] = gate
    if ret:
        flag_overrides["retrieval"] = ret
    config = _merge_config(config, flag_overrides)
    if config["trace_path"] is None:
        raise ConfigError("a trace path is required (--trace or config trace_path)")
    if config["output_dir"] is None:
        raise ConfigError("an output directory is required (--out-dir or config output_dir)")
    if config["gate"]["tau"] is None:
        raise ConfigError("a threshold is required (--tau or config gate.tau)")
    if config["policy"] not in POLICIES:
        raise ConfigError(f"policy must be one of {POLICIES}, got {config['policy']!r}")
    if config["recheck"] and config["gate"]["recheck_stride"] is None:
        raise ConfigError("recheck runs need gate.recheck_stride (or --recheck-stride)")
    if config["recheck"] and config["policy"] != "gate":
        raise ConfigError("recheck only applies to the gate policy, not forced always/never runs")
    return config


def _gate_config(block: dict) -> GateConfig:
    return GateConfig(
        gate_kind=block["kind"],
        tau=float(block["tau"]),
        k=int(block["k"]),
        beta=float(block["beta"]),
        n_samples=int(block["n_samples"]),
        sample_temperature=float(block["sample_temperature"]),
        recheck_stride=block["recheck_stride"],
    )


def _cost_params(block: dict) -> CostParams:
    return CostParams(
        t_draft=float(block["t_draft"]),
        t_ctx=float(block["t_ctx"]),
        e_out0=float(block["e_out0"]),
        e_out1=float(block["e_out1"]),
        per_token_cost=float(block["per_token_cost"]),
        retrieval_overhead=float(block["retrieval_overhead"]),
    )


def _build_retriever(block: dict) -> Optional[Retriever]:
    if block["index_path"] is None:
        return None
    if block["passages_path"] is None:
        raise ConfigError("retrieval.index_path is set but retrieval.passages_path is not")
    index = retrieval.load_index(block["index_path"])
    passages = {p.id: p for p in retrieval.read_passages(block["passages_path"])}
    return Retriever(index=index, passages=passages, top_k=int(block["topk"]), ctx_budget=int(block["ctx_budget"]))


def _dump_json(obj: Any, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_score(args: argparse.Namespace) -> int:
    records = load_traces(args.trace)
    if args.k is not None:
        short = [r.query_id for r in records if len(r.steps) < args.k]
        if short:
            raise DataError(f"--k {args.k} exceeds recorded draft length for queries {short[:5]}")
    config = GateConfig(
        gate_kind=args.gate,
        tau=0.0,
        k=args.k if args.k is not None else max(len(r.steps) for r in records),
        beta=args.beta,
        n_samples=args.n_samples,
        sample_temperature=args.temperature,
    )
    scored = reports.score_traces(records, config)
    count = calibration.write_scores(args.out, scored)
    print(f"wrote {count} scores to {args.out}")
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    if (args.scores is None) == (args.dev is None):
        raise ConfigError("pass exactly one of --scores (with --rho) or --dev (with --grid)")
    if args.scores is not None:
        if args.rho is None:
            raise ConfigError("--scores requires --rho")
        values = [score for _, score in calibration.load_scores(args.scores)]
        tau = calibration.quantile_threshold(values, args.rho)
        info = {
            "method": "quantile",
            "rho": args.rho,
            "n": len(values),
            "tau": tau,
            "realized_rate": calibration.realized_rate(values, tau),
        }
    else:
        if not args.grid:
            raise ConfigError("--dev requires --grid")
        grid = _parse_grid(args.grid)
        dev = [record for _, record in calibration.load_dev_records(args.dev)]
        tau = calibration.accuracy_opt_threshold(dev, grid)
        info = {
            "method": "accuracy",
            "grid": grid,
            "n": len(dev),
            "tau": tau,
            "dev_accuracy": calibration.gated_accuracy(dev, tau),
        }
    print(repr(tau))
    if args.out:
        _dump_json(info, Path(args.out))
    return EXIT_OK


def cmd_index_chunk(args: argparse.Namespace) -> int:
    articles = retrieval.read_articles(args.articles)
    passages = retrieval.chunk_corpus(
        articles, size=args.size, overlap=args.overlap, min_chars=args.min_chars
    )
    retrieval.write_passages(passages, args.out)
    print(f"wrote {len(passages)} passages from {len(articles)} articles to {args.out}")
    return EXIT_OK


def cmd_index_build(args: argparse.Namespace) -> int:
    index = retrieval.load_index(args.embeddings)
    if args.passages:
        passages = retrieval.read_passages(args.passages)
        expected = sorted(p.id for p in passages)
        got = sorted(int(i) for i in index.ids)
        if expected != got:
            raise DataError("embedding ids do not match the passage file ids")
    retrieval.save_index(index, args.out)
    print(f"wrote index with {index.n} vectors (dim {index.dim}) to {args.out}")
    return EXIT_OK


def cmd_index_search(args: argparse.Namespace) -> int:
    index = retrieval.load_index(args.index)
    query = _load_query_vector(args.query)
    hits = retrieval.search(index, query, args.topk)
    lines = [f"{hit.id}\t{hit.score!r}" for hit in hits]
    output = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(output, encoding="utf-8")
    else:
        sys.stdout.write(output)
    return EXIT_OK


def _load_query_vector(path: str) -> np.ndarray:
    obj = _load_json_value(path)
    if not isinstance(obj, list) or not all(isinstance(v, (int, float)) for v in obj):
        raise DataError(f"{path}: query vector file must hold a JSON array of numbers")
    return np.asarray(obj, dtype=np.float64)


def _load_json_value(path: str) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc


def cmd_run(args: argparse.Namespace) -> int:
    config = _resolve_run_config(args)
    records = load_traces(config["trace_path"])
    generator = TraceReplayGenerator(records)
    retriever = _build_retriever(config["retrieval"])
    gate = _gate_config(config["gate"])
    cost = _cost_params(config["cost"])

    out_dir = Path(config["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    run_records, failures, summary = run_dataset(
        records,
        gate,
        generator,
        retriever=retriever,
        cost=cost,
        seed=int(config["seed"]),
        template=config["prompt_template"],
        policy=config["policy"],
        recheck=bool(config["recheck"]),
    )
    with open(out_dir / "records.jsonl", "w", encoding="utf-8") as fh:
        for record in run_records:
            fh.write(json.dumps(run_record_to_dict(record), ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")
    _dump_json(
        {"summary": summary.to_dict(), "failures": [{"query_id": q, "error": e} for q, e in failures]},
        out_dir / "summary.json",
    )
    _dump_json(config, out_dir / "resolved_config.json")
    print(
        f"ran {summary.n} queries ({summary.failures} failures): "
        f"EM {summary.em_pct:.1f} / F1 {summary.f1_pct:.1f}, "
        f"rate {summary.retrieval_rate:.3f}, delta latency {summary.delta_latency_s:+.3f}s"
    )
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    records = load_traces(args.trace)
    k = args.k if args.k is not None else max(len(r.steps) for r in records)
    gate = GateConfig(
        gate_kind=args.gate,
        tau=0.0,
        k=k,
        beta=args.beta,
        n_samples=args.n_samples,
        sample_temperature=args.temperature,
    )
    cost = CostParams(
        t_draft=k,
        t_ctx=args.ctx_budget,
        e_out0=0,
        e_out1=0,
        per_token_cost=args.per_token_cost,
        retrieval_overhead=args.retrieval_overhead,
    )
    grid = _parse_grid(args.grid)
    rows = reports.sweep(records, gate, grid, cost)
    report = reports.emit_report(rows, args.format)
    if args.out:
        Path(args.out).write_text(report, encoding="utf-8")
        print(f"wrote {len(rows)}-row report to {args.out}")
    else:
        sys.stdout.write(report)
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    spec_obj = _load_json(args.spec)
    known = {"population", "tau", "consistency"}
    unknown = set(spec_obj) - known
    if unknown:
        raise ConfigError(f"unknown simulation spec fields {sorted(unknown)}")
    if "population" not in spec_obj:
        raise ConfigError("simulation spec needs a 'population' object")
    pop_spec = _population_spec(spec_obj["population"])
    tau = float(spec_obj.get("tau", pop_spec.tau_star))

    population = simlab.generate(pop_spec)
    acc = simlab.evaluate_policies(population, tau)
    dominance = [
        simlab.check_weak_dominance(population, tau),
        simlab.check_always_dominance(population, tau),
    ]
    dominance_table = reports.emit_table(
        simlab.DOMINANCE_HEADERS, [r.row() for r in dominance], args.format
    )

    consistency_table = None
    if "consistency" in spec_obj:
        c = dict(spec_obj["consistency"])
        unknown = set(c) - {"rho_list", "n_calib", "n_eval", "trials", "tol", "seed"}
        if unknown:
            raise ConfigError(f"unknown consistency spec fields {sorted(unknown)}")
        consistency_reports = simlab.check_budget_consistency(
            pop_spec.u_dist,
            rho_list=[float(r) for r in c.get("rho_list", [0.05, 0.1, 0.2, 0.5])],
            n_calib=int(c.get("n_calib", 10000)),
            n_eval=int(c.get("n_eval", 10000)),
            trials=int(c.get("trials", 100)),
            seed=int(c.get("seed", pop_spec.seed)),
            tol=float(c.get("tol", 0.02)),
        )
        consistency_table = reports.emit_table(
            simlab.CONSISTENCY_HEADERS, [r.row() for r in consistency_reports], args.format
        )

    print(
        f"policies at tau={tau:g}: never {acc.acc_never:.6f}, always {acc.acc_always:.6f}, "
        f"gate {acc.acc_gate:.6f}, rate {acc.pi:.3f}"
    )
    sys.stdout.write(dominance_table)
    if consistency_table is not None:
        sys.stdout.write(consistency_table)
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ext = args.format
        (out_dir / f"dominance.{ext}").write_text(dominance_table, encoding="utf-8")
        if consistency_table is not None:
            (out_dir / f"consistency.{ext}").write_text(consistency_table, encoding="utf-8")
        _dump_json(
            {
                "tau": tau,
                "acc_never": acc.acc_never,
                "acc_always": acc.acc_always,
                "acc_gate": acc.acc_gate,
                "pi": acc.pi,
            },
            out_dir / "policies.json",
        )
        _dump_json(spec_obj, out_dir / "resolved_spec.json")
    return EXIT_OK


def _population_spec(obj: dict) -> simlab.PopulationSpec:
    known = {"n", "tau_star", "delta_low", "delta_high", "u_dist", "a0_base", "seed"}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown population spec fields {sorted(unknown)}")
    missing = {"n", "tau_star", "delta_low", "delta_high", "u_dist", "a0_base"} - set(obj)
    if missing:
        raise ConfigError(f"population spec missing fields {sorted(missing)}")

    def dist(block: Any, name: str) -> simlab.DistSpec:
        if not isinstance(block, dict) or "kind" not in block or set(block) - {"kind", "a", "b"}:
            raise ConfigError(f"{name} must be an object with fields kind[, a, b]")
        return simlab.DistSpec(
            kind=block["kind"], a=float(block.get("a", 0.0)), b=float(block.get("b", 0.0))
        )

    return simlab.PopulationSpec(
        n=int(obj["n"]),
        tau_star=float(obj["tau_star"]),
        delta_low=dist(obj["delta_low"], "delta_low"),
        delta_high=dist(obj["delta_high"], "delta_high"),
        u_dist=dist(obj["u_dist"], "u_dist"),
        a0_base=float(obj["a0_base"]),
        seed=int(obj.get("seed", 0)),
    )


def _parse_grid(text: str) -> list[float]:
    """Comma-separated floats ('-inf,0,0.5,inf') or 'lo:hi:count' linspace."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"grid range must be lo:hi:count, got {text!r}")
        try:
            lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
        except ValueError as exc:
            raise ConfigError(f"bad grid range {text!r}") from exc
        if count < 1:
            raise ConfigError("grid count must be >= 1")
        return [float(v) for v in np.linspace(lo, hi, count)]
    try:
        grid = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad grid {text!r}") from exc
    if not grid:
        raise ConfigError("grid is empty")
    return grid


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="raggate",
        description="Selective retrieval gating: score traces, calibrate thresholds, "
        "build/search exact indices, replay pipelines, sweep frontiers, simulate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_gate_flags(p: argparse.ArgumentParser, k_default: Optional[int] = None) -> None:
        p.add_argument("--gate", choices=GATE_KINDS, required=True, help="uncertainty signal")
        p.add_argument("--k", type=int, default=k_default,
                       help="draft steps to score (default: all recorded)")
        p.add_argument("--beta", type=float, default=1.0, help="margin link temperature")
        p.add_argument("--n-samples", dest="n_samples", type=int, default=3,
                       help="sampled prefixes for the variance gate")
        p.add_argument("--temperature", type=float, default=0.7,
                       help="sampling temperature the prefixes were drawn at")

    p = sub.add_parser("score", help="gate score per trace record")
    p.add_argument("--trace", required=True)
    add_gate_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("calibrate", help="pick tau from a dev split")
    p.add_argument("--scores", help="two-column scores file (use with --rho)")
    p.add_argument("--rho", type=float, help="target retrieval budget in [0, 1]")
    p.add_argument("--dev", help="four-column dev outcome file (use with --grid)")
    p.add_argument("--grid", help="tau candidates: 'a,b,c' or 'lo:hi:count'")
    p.add_argument("--out", help="also write the calibration record as JSON")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("index", help="chunk corpora, build and search indices")
    index_sub = p.add_subparsers(dest="index_command", required=True)

    pc = index_sub.add_parser("chunk", help="split articles into passages")
    pc.add_argument("--articles", required=True)
    pc.add_argument("--out", required=True)
    pc.add_argument("--size", type=int, default=1000)
    pc.add_argument("--overlap", type=int, default=100)
    pc.add_argument("--min-chars", dest="min_chars", type=int, default=200)
    pc.set_defaults(func=cmd_index_chunk)

    pb = index_sub.add_parser("build", help="validate embeddings and persist an index")
    pb.add_argument("--embeddings", required=True)
    pb.add_argument("--passages", help="cross-check embedding ids against this passage file")
    pb.add_argument("--out", required=True)
    pb.set_defaults(func=cmd_index_build)

    ps = index_sub.add_parser("search", help="exact top-K inner-product search")
    ps.add_argument("--index", required=True)
    ps.add_argument("--query", required=True, help="JSON array file holding the query vector")
    ps.add_argument("--topk", type=int, default=5)
    ps.add_argument("--out")
    ps.set_defaults(func=cmd_index_search)

    p = sub.add_parser("run", help="replay a trace through the gated pipeline")
    p.add_argument("--config", help="run config JSON (flags override)")
    p.add_argument("--trace")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--gate", choices=GATE_KINDS)
    p.add_argument("--tau", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--index")
    p.add_argument("--passages")
    p.add_argument("--topk", type=int)
    p.add_argument("--ctx-budget", dest="ctx_budget", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--recheck-stride", dest="recheck_stride", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="threshold sweep over a trace")
    p.add_argument("--trace", required=True)
    add_gate_flags(p)
    p.add_argument("--grid", required=True, help="tau values 'a,b,c' or 'lo:hi:count'")
    p.add_argument("--ctx-budget", dest="ctx_budget", type=int, default=256,
                   help="simulated context tokens per retrieval (budget fully used)")
    p.add_argument("--per-token-cost", dest="per_token_cost", type=float, default=0.0,
                   help="seconds per token for the latency projection")
    p.add_argument("--retrieval-overhead", dest="retrieval_overhead", type=float, default=0.0,
                   help="fixed seconds per retrieval call")
    p.add_argument("--format", choices=reports.REPORT_FORMATS, default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("simulate", help="dominance and calibration-consistency lab")
    p.add_argument("--spec", required=True, help="population/consistency spec JSON")
    p.add_argument("--format", choices=reports.REPORT_FORMATS, default="md")
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # anything else is a broken internal invariant
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
