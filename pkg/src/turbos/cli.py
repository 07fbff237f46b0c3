"""Command-line entry point: ``turbos {generate,verify,bench,cpsim}``.

Exit codes: 0 success, 1 verification failure, 2 bad flags / config / input,
3 weights file or shape mismatch.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import cpsim, flops
from .errors import ConfigError, InputError, PlanError, TurbosError, WeightsError
from .formats import load_config, load_weights
from .model import LayerKind, build_model, decode_text, encode_text, generate, prefill, decode_step
from .verify import SUITES, run_suite

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_WEIGHTS = 0, 1, 2, 3
CP_TOL = 1e-4


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def cmd_generate(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        _err(str(e))
        return EXIT_USAGE
    try:
        model = load_weights(args.weights, cfg) if args.weights else build_model(cfg)
    except WeightsError as e:
        _err(str(e))
        return EXIT_WEIGHTS
    except OSError as e:
        _err(f"cannot read weights file {args.weights}: {e.strerror}")
        return EXIT_WEIGHTS
    try:
        tokens = generate(model, encode_text(args.prompt), args.max_new, temperature=args.temp, seed=args.seed)
    except InputError as e:
        _err(str(e))
        return EXIT_USAGE
    print("tokens: " + " ".join(str(t) for t in tokens))
    print(decode_text(tokens))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_suite(args.suite, seed=args.seed, trials=args.trials)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def _parse_lens(text: str) -> list[int]:
    try:
        lens = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad sequence length list {text!r}") from None
    if not lens or min(lens) < 1:
        raise argparse.ArgumentTypeError("sequence lengths must be positive")
    return lens


def _time_layer(model, kind: LayerKind, seq_len: int, mode: str) -> float:
    """Wall time in ms of one layer of ``kind`` inside a one-layer model."""
    from dataclasses import replace

    single = build_model(replace(model.cfg, block_pattern=kind.value))
    rng = np.random.default_rng(0)
    toks = rng.integers(0, single.cfg.vocab_size, size=seq_len)
    if mode == "prefill":
        t0 = time.perf_counter()
        prefill(single, toks)
        return (time.perf_counter() - t0) * 1e3
    _, session = prefill(single, toks)
    t0 = time.perf_counter()
    decode_step(single, session, int(toks[0]))
    return (time.perf_counter() - t0) * 1e3


def cmd_bench(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        _err(str(e))
        return EXIT_USAGE
    census = {LayerKind.ATTENTION: cfg.census.attention, LayerKind.MAMBA: cfg.census.mamba, LayerKind.FFN: cfg.census.ffn}
    model = None if args.flops_only else build_model(cfg)
    if model and max(args.seq_lens) > model.max_context:
        _err(f"sequence length exceeds context of {model.max_context}")
        return EXIT_USAGE
    count = flops.prefill_flops if args.mode == "prefill" else flops.decode_flops
    header = f"{'mode':<8}{'seq_len':>9} {'kind':<5}{'layers':>7}{'flops_per_layer':>20}{'flops_total':>22}"
    print(header + ("" if args.flops_only else f"{'wall_ms':>12}"))
    for T in args.seq_lens:
        for kind in LayerKind:
            per = count(cfg, kind, T)
            row = f"{args.mode:<8}{T:>9} {kind.value:<5}{census[kind]:>7}{per:>20}{per * census[kind]:>22}"
            if not args.flops_only:
                row += f"{_time_layer(model, kind, T, args.mode):>12.3f}"
            print(row)
    return EXIT_OK


def cmd_cpsim(args) -> int:
    try:
        plan = cpsim.shard_sequence(args.seq_len, args.ranks, args.chunk)
    except PlanError as e:
        _err(str(e))
        return EXIT_USAGE
    rng = np.random.default_rng(0)
    inp = cpsim.ScanInputs.random(rng, args.seq_len)
    h0 = rng.normal(size=inp.state_shape).astype(np.float32)
    from .ssd import ssd_chunked_scan

    y_ref, h_ref = ssd_chunked_scan(inp.A, inp.dt, inp.x, inp.B, inp.C, inp.D, h0, chunk_size=args.chunk)
    paradigms = ["sequential", "parallel"] if args.paradigm == "both" else [args.paradigm]
    status, lines = EXIT_OK, []
    for name in paradigms:
        fn = cpsim.cp_sequential_scan if name == "sequential" else cpsim.cp_parallel_scan
        y, h, trace = fn(plan, inp, h0)
        dev = float(max(np.abs(y - y_ref).max(), np.abs(h - h_ref).max()))
        print(
            f"{name} ranks={plan.n_ranks} max_dev={dev:.3e} "
            f"StateForward={trace.count(cpsim.MessageKind.STATE_FORWARD)} "
            f"AllGatherDecayChunk={trace.count(cpsim.MessageKind.ALL_GATHER_DECAY_CHUNK)} "
            f"ReduceScatterStates={trace.count(cpsim.MessageKind.REDUCE_SCATTER_STATES)} "
            f"critical_path={cpsim.trace_critical_path(trace)} "
            f"{'pass' if dev <= CP_TOL else 'fail'}"
        )
        lines.extend(trace.export_lines())
        if dev > CP_TOL:
            status = EXIT_FAIL
    if args.trace:
        with open(args.trace, "w") as fh:
            fh.writelines(line + "\n" for line in lines)
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="turbos", description="Hybrid Mamba2/attention/MoE reference engine")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate byte tokens from a prompt")
    g.add_argument("--config", required=True)
    g.add_argument("--weights")
    g.add_argument("--prompt", default="")
    g.add_argument("--max-new", type=int, default=16)
    mode = g.add_mutually_exclusive_group()
    mode.add_argument("--greedy", action="store_true")
    mode.add_argument("--temp", type=float)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    v = sub.add_parser("verify", help="run oracle-equivalence suites")
    v.add_argument("--suite", choices=[*SUITES, "all"], default="all")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--trials", type=int, default=5)
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="analytic FLOP counts and wall times per layer kind")
    b.add_argument("--config", required=True)
    b.add_argument("--seq-lens", type=_parse_lens, default=[128, 256, 512])
    b.add_argument("--mode", choices=["prefill", "decode"], default="prefill")
    b.add_argument("--flops-only", action="store_true")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("cpsim", help="simulate context-parallel state passing")
    c.add_argument("--ranks", type=int, required=True)
    c.add_argument("--seq-len", type=int, required=True)
    c.add_argument("--chunk", type=int, default=16)
    c.add_argument("--paradigm", choices=["sequential", "parallel", "both"], default="both")
    c.add_argument("--trace")
    c.set_defaults(func=cmd_cpsim)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "max_new", 1) < 1 or getattr(args, "trials", 1) < 1:
        _err("counts must be >= 1")
        return EXIT_USAGE
    if args.command == "generate" and args.temp is not None and args.temp <= 0:
        _err("--temp must be positive")
        return EXIT_USAGE
    try:
        return args.func(args)
    except TurbosError as e:
        _err(str(e))
        return EXIT_WEIGHTS if isinstance(e, WeightsError) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
