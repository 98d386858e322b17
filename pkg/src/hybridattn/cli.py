"""Command-line entry point.

Subcommands: gen-traces, train-phi, build-cache, decode, diagnose, budget,
tradeoff. Every command writes ``<command>.resolved.ini`` next to its
outputs. Exit codes: 0 ok, 1 usage or config error, 2 data-format error,
3 infeasible budget.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import budget as bud
from . import diagnostics as diag
from .attention import exact_terms, full_attention, make_partition, topk_select
from .completion import build_stable_cache, cache_deserialize, cache_serialize, hybrid_decode
from .config import ConfigError, ExperimentConfig, load_config, resolved_text
from .distillation import load_traces, save_traces, traces_from_states, train, write_traces_jsonl
from .errors import FormatError, InfeasibleBudgetError
from .feature_map import init_pair, load_checkpoint, save_checkpoint
from .numerics import seeded_rng
from .states import generate_states, load_states, save_states
from .tradeoff import MapGrid, emit_map, load_components, synthetic_components, write_map

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_INFEASIBLE = 0, 1, 2, 3
MODES = ("full", "sink_tail", "topk", "topk_phi")

log = logging.getLogger("hybridattn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- helpers -----------------------------------------------------------------


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else ExperimentConfig().validate()


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_seed(args) -> int:
    if args.seed is None:
        raise UsageError(f"{args.command} is randomized and needs an explicit --seed")
    return args.seed


def _echo_config(out: Path, args, cfg: ExperimentConfig, **extra) -> None:
    run = {"command": args.command}
    if args.seed is not None:
        run["seed"] = args.seed
    run.update({k: v for k, v in extra.items() if v is not None})
    (out / f"{args.command}.resolved.ini").write_text(resolved_text(cfg, run))


def _need(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing --{what}")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {p}")
    return p


def _map_each(fn, items, threads: int):
    """Ordered map; results come back in input order whatever the thread count."""
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _parse_floats(text: str | None):
    if text is None:
        return None
    try:
        return tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise UsageError(f"not a comma-separated number list: {text!r}") from exc


def _states_and_maps(args, cfg: ExperimentConfig, need_maps: bool):
    states = load_states(_need(args.states, "states"))
    pairs = None
    if need_maps:
        pairs = load_checkpoint(_need(args.checkpoint, "checkpoint"))
        d_h = states[0].state.d_h
        for hs in states:
            pair = pairs.get((hs.layer, hs.head))
            if pair is None:
                raise UsageError(f"checkpoint has no maps for (layer={hs.layer}, head={hs.head})")
            if pair.phi_q.d_h != d_h:
                raise UsageError(f"checkpoint d_h={pair.phi_q.d_h} but states have d_h={d_h}")
    partition = make_partition(states[0].state.n, cfg.partition.n_sink, cfg.partition.n_tail)
    return states, pairs, partition


def _caches_for(states, pairs, partition, cache_path, prefill: int | None):
    """Completion caches per state index; a cache file stands in for one prefill."""
    if cache_path is None:
        return {i: build_stable_cache(pairs[(hs.layer, hs.head)].phi_k, hs.state, partition)
                for i, hs in enumerate(states)}
    loaded = cache_deserialize(_need(cache_path, "cache"))
    chosen = [i for i, hs in enumerate(states) if prefill is None or hs.prefill == prefill]
    if len({states[i].prefill for i in chosen}) > 1:
        raise UsageError("a cache file covers one prefill; pass --prefill to pick it")
    out = {}
    for i in chosen:
        hs = states[i]
        c = loaded.get((hs.layer, hs.head))
        if c is None:
            raise UsageError(f"cache has no entry for (layer={hs.layer}, kv_head={hs.head})")
        if c.mid_size != partition.mid_size or c.d_h != hs.state.d_h:
            raise UsageError("cache dimensions do not match the states and partition")
        out[i] = c
    return out


# --- commands ----------------------------------------------------------------


def cmd_gen_traces(args) -> int:
    cfg = _config(args)
    seed = _require_seed(args)
    out = _out_dir(args)
    states = generate_states(seeded_rng(seed), cfg.synthetic_config())
    partition = make_partition(cfg.traces.n, cfg.partition.n_sink, cfg.partition.n_tail)
    traces = traces_from_states(states, partition)
    save_states(out / "states.bin", states)
    save_traces(out / "traces.bin", traces, cfg.partition.n_sink, cfg.partition.n_tail)
    if args.jsonl:
        write_traces_jsonl(out / "traces.jsonl", traces)
    _echo_config(out, args, cfg)
    print(f"wrote {len(states)} states and {len(traces)} traces to {out}")
    return EXIT_OK


def cmd_train_phi(args) -> int:
    cfg = _config(args)
    seed = _require_seed(args)
    out = _out_dir(args)
    tf = load_traces(_need(args.traces, "traces"))
    d = cfg.dims
    rng = seeded_rng(seed)
    if args.init_checkpoint:
        pairs = load_checkpoint(_need(args.init_checkpoint, "init-checkpoint"))
        p0 = pairs[(0, 0)].phi_q
        if p0.d_h != tf.d_h:
            raise UsageError(f"checkpoint d_h={p0.d_h} but traces have d_h={tf.d_h}")
    else:
        if d.d_h != tf.d_h:
            raise UsageError(f"config d_h={d.d_h} but traces have d_h={tf.d_h}")
        pairs = {(l, h): init_pair(rng, d.d_h, d.d_emb, d.d_phi, l, h)
                 for l in range(d.layers) for h in range(d.heads)}
    uncovered = sorted({(t.layer, t.q_head) for t in tf.traces} - set(pairs))
    if uncovered:
        raise UsageError(f"traces reference heads outside the map grid: {uncovered[:4]}")
    res = train(tf.traces, pairs, cfg.loss_config(), cfg.optimizer_config(), cfg.training.epochs, rng)
    save_checkpoint(out / "phi.ckpt", res.pairs)
    (out / "loss_history.csv").write_text(
        _csv_text(["epoch", "loss"], [[e, repr(v)] for e, v in enumerate(res.history)]))
    rows = [[e, l, h, repr(v)] for (l, h), hist in sorted(res.head_history.items()) for e, v in enumerate(hist)]
    (out / "head_loss_history.csv").write_text(_csv_text(["epoch", "layer", "head", "loss"], rows))
    _echo_config(out, args, cfg, traces=args.traces, init_checkpoint=args.init_checkpoint)
    print(f"trained {len(res.pairs)} map pairs; loss {res.history[0]!r} -> {res.history[-1]!r}")
    return EXIT_OK


def cmd_build_cache(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    states, pairs, partition = _states_and_maps(args, cfg, need_maps=True)
    chosen = [hs for hs in states if hs.prefill == args.prefill]
    if not chosen:
        raise UsageError(f"state file has no prefill {args.prefill}")
    caches = {(hs.layer, hs.head): build_stable_cache(pairs[(hs.layer, hs.head)].phi_k, hs.state, partition)
              for hs in chosen}
    cache_serialize(out / "cache.bin", caches)
    _echo_config(out, args, cfg, states=args.states, checkpoint=args.checkpoint, prefill=args.prefill)
    empty = sum(c.is_empty for c in caches.values())
    print(f"wrote {len(caches)} caches (mid size {partition.mid_size}, {empty} empty)")
    return EXIT_OK


def _retrieval_size(args, cfg, mode: str, n: int, d_h: int, d_phi: int, mid_size: int, l_gen) -> int:
    if args.k is not None:
        if not 0 <= args.k <= mid_size:
            raise UsageError(f"--k {args.k} outside [0, |M|={mid_size}]")
        return args.k
    f = args.f if args.f is not None else cfg.evaluation.fractions[0]
    bc = cfg.budget_config(n, d_h, d_phi)
    if mode == "topk":
        k = bud.k_topk(bc, f)
    else:
        k, ok = bud.k_hyb(bc, f, l_gen)
        if not ok:
            raise InfeasibleBudgetError(
                f"f={f!r} gives {bud.budget_tokens(n, f)} tokens, below anchors plus the amortized cache fetch")
    return min(k, mid_size)


def cmd_decode(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    mode = args.mode
    uses_phi = mode == "topk_phi"
    states, pairs, partition = _states_and_maps(args, cfg, need_maps=uses_phi)
    states = [hs for hs in states if hs.prefill == args.prefill]
    if not states:
        raise UsageError(f"state file has no prefill {args.prefill}")
    if args.cache and not uses_phi:
        raise UsageError("--cache only applies to mode topk_phi")
    l_gen = args.l_gen if args.l_gen is not None else cfg.evaluation.l_gen[0]
    d_h = states[0].state.d_h
    d_phi = pairs[(0, 0)].phi_q.d_phi if uses_phi else cfg.dims.d_phi
    k = 0
    if mode in ("topk", "topk_phi"):
        k = _retrieval_size(args, cfg, mode, states[0].state.n, d_h, d_phi, partition.mid_size, l_gen)
    caches = _caches_for(states, pairs, partition, args.cache, args.prefill) if uses_phi else {}

    def run(i):
        hs = states[i]
        rows = []
        for qi, q in enumerate(hs.queries):
            y_full = full_attention(q, hs.state)
            rho = 0.0
            if mode == "full":
                y = y_full
            elif mode == "topk_phi":
                res = hybrid_decode(q, hs.state, partition, k, pairs[(hs.layer, hs.head)], caches[i])
                y, rho = res.y, res.rho_z
            else:
                loaded = np.concatenate([partition.anchors, topk_select(q, hs.state, partition, k)])
                y = exact_terms(q, hs.state, loaded).y
            err = diag.rel_l1_error(y, y_full)
            rows.append([hs.layer, hs.head, hs.prefill, qi, mode, k, repr(float(rho)), repr(err)]
                        + [repr(float(v)) for v in y])
        return rows

    per_state = _map_each(run, range(len(states)), args.threads)
    header = ["layer", "head", "prefill", "query", "mode", "K", "rho_Z", "rel_l1"] + [f"y{j}" for j in range(d_h)]
    rows = [r for block in per_state for r in block]
    (out / "decode.csv").write_text(_csv_text(header, rows))
    _echo_config(out, args, cfg, states=args.states, checkpoint=args.checkpoint, cache=args.cache,
                 mode=mode, f=args.f, k=args.k, l_gen=l_gen, prefill=args.prefill)
    mean_err = float(np.mean([float(r[7]) for r in rows]))
    print(f"decoded {len(rows)} queries, mode={mode}, K={k}, mean rel-l1 {mean_err!r}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    states, pairs, partition = _states_and_maps(args, cfg, need_maps=True)
    caches = _caches_for(states, pairs, partition, args.cache, args.prefill if args.cache else None)
    indices = sorted(caches)
    ev = cfg.evaluation
    fractions = _parse_floats(args.f) or ev.fractions
    l_gen = args.l_gen if args.l_gen is not None else ev.l_gen[0]
    first = states[indices[0]].state
    bc = cfg.budget_config(first.n, first.d_h, pairs[(0, 0)].phi_q.d_phi)
    k_fixed = min(partition.mid_size, math.ceil(ev.fixed_k_fraction * partition.mid_size))

    budgets = []
    for f in fractions:
        n = bud.budget_tokens(first.n, f)
        kh, ok = bud.k_hyb_for_budget(bc, n, l_gen)
        if not ok:
            log.warning("f=%r is infeasible for the hybrid; reporting k_hyb=0", f)
        budgets.append((f, bud.k_topk_for_budget(bc, n), kh))

    def run(i):
        hs = states[i]
        pair = pairs[(hs.layer, hs.head)]
        per_budget = [[] for _ in budgets]
        fixed, curves = [], []
        for qi, q in enumerate(hs.queries):
            inst = diag.Instance(q, hs.state, partition, pair, caches[i])
            for b, (_, kt, kh) in enumerate(budgets):
                per_budget[b].append(diag.query_diagnostics(inst, kt, kh, hs.layer, hs.head, hs.prefill, qi))
            fixed.append(diag.query_diagnostics(inst, k_fixed, k_fixed, hs.layer, hs.head, hs.prefill, qi))
            curves.append(diag.mass_curve(q, hs.state, partition.mid))
        return per_budget, fixed, curves

    results = _map_each(run, indices, args.threads)

    summary = {"mid_size": partition.mid_size, "fixed_K": k_fixed, "budgets": []}
    for b, (f, kt, kh) in enumerate(budgets):
        rows = [r for res in results for r in res[0][b]]
        tag = f"f{f!r}"
        (out / f"heads_{tag}.csv").write_text(diag.heads_csv(diag.aggregate_heads(rows)))
        (out / f"queries_{tag}.csv").write_text(diag.queries_csv(rows))
        quartiles = diag.quartile_summary(rows)
        (out / f"quartiles_{tag}.csv").write_text(diag.quartiles_csv(quartiles))
        summary["budgets"].append({"f": f, "k_topk": kt, "k_hyb": kh,
                                   "quartile_gain": [q.gain for q in quartiles]})
    fixed_rows = [r for res in results for r in res[1]]
    (out / "fixed_k.csv").write_text(diag.queries_csv(fixed_rows))
    if len(fixed_rows) >= 2:
        rho = spearmanr([r.h_mid for r in fixed_rows], [r.e_sel for r in fixed_rows]).statistic
        summary["spearman_H_mid_e_sel"] = None if math.isnan(rho) else float(rho)

    # mass curve: mean over the first ``curve_queries`` queries of each head
    curves: dict[tuple[int, int], list[np.ndarray]] = {}
    for i, res in zip(indices, results):
        hs = states[i]
        bucket = curves.setdefault((hs.layer, hs.head), [])
        bucket.extend(res[2][: max(0, ev.curve_queries - len(bucket))])
    (out / "mass_curve.csv").write_text(diag.mass_curve_csv({k: np.mean(v, axis=0) for k, v in curves.items()}))
    (out / "diagnose_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _echo_config(out, args, cfg, states=args.states, checkpoint=args.checkpoint, cache=args.cache, l_gen=l_gen)
    print(f"diagnosed {len(fixed_rows)} queries over {len(curves)} heads at {len(budgets)} budgets")
    return EXIT_OK


def cmd_budget(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    n = args.n if args.n is not None else cfg.traces.n
    d_h = args.d_h if args.d_h is not None else cfg.dims.d_h
    d_phi = args.d_phi if args.d_phi is not None else cfg.dims.d_phi
    fractions = _parse_floats(args.f) or cfg.evaluation.fractions
    l_gens = _parse_floats(args.l_gen) or cfg.evaluation.l_gen
    try:
        bc = cfg.budget_config(n, d_h, d_phi)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rows = bud.budget_table(bc, fractions, [g if math.isinf(g) else (int(g) if g == int(g) else g) for g in l_gens])
    (out / "budget.csv").write_text(_csv_text(bud.BUDGET_HEADER, [r.csv_fields() for r in rows]))
    _echo_config(out, args, cfg, n=n, d_h=d_h, d_phi=d_phi)
    sys.stdout.write(_csv_text(bud.BUDGET_HEADER, [r.csv_fields() for r in rows]))
    return EXIT_OK


def cmd_tradeoff(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    if args.components:
        components = load_components(_need(args.components, "components"))
    elif args.synthetic:
        components = synthetic_components()
    else:
        raise UsageError("pass --components FILE or --synthetic")
    t = cfg.tradeoff
    grid = MapGrid(np.geomspace(t.xi_min, t.xi_max, t.n_xi), np.linspace(t.gamma_min, t.gamma_max, t.n_gamma), t.c)
    result = emit_map(components, grid)
    write_map(result, out)
    _echo_config(out, args, cfg, components=args.components, synthetic=args.synthetic or None)
    print(f"wrote speedup map ({len(grid.c)} x {grid.xi.size} x {grid.gamma.size}) and "
          f"{sum(result.metadata['contour_points'].values())} contour points")
    return EXIT_OK


# --- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="seed for randomized commands")
    common.add_argument("--out-dir", default=".", help="directory for outputs (created if missing)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for per-head work")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="hybridattn", description="Top-K attention with a learned feature-map completion.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-traces", parents=[common], help="synthetic prefill states and teacher traces")
    p.add_argument("--jsonl", action="store_true", help="also write a JSON-lines debug dump")
    p.set_defaults(func=cmd_gen_traces)

    p = sub.add_parser("train-phi", parents=[common], help="distill feature maps onto a trace file")
    p.add_argument("--traces", required=True)
    p.add_argument("--init-checkpoint", help="resume from these maps instead of a fresh init")
    p.set_defaults(func=cmd_train_phi)

    p = sub.add_parser("build-cache", parents=[common], help="completion caches for one prefill")
    p.add_argument("--states", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prefill", type=int, default=0)
    p.set_defaults(func=cmd_build_cache)

    p = sub.add_parser("decode", parents=[common], help="decode every query of one prefill")
    p.add_argument("--states", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--cache")
    p.add_argument("--mode", choices=MODES, default="topk_phi")
    grp = p.add_mutually_exclusive_group()
    grp.add_argument("--f", type=float, help="read budget as a fraction of N")
    grp.add_argument("--k", type=int, help="explicit retrieval size")
    p.add_argument("--l-gen", type=float, help="decode steps sharing one cache fetch")
    p.add_argument("--prefill", type=int, default=0)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("diagnose", parents=[common], help="entropy, errors, gains and mass curves")
    p.add_argument("--states", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", help="precomputed caches for one prefill (built on the fly otherwise)")
    p.add_argument("--prefill", type=int, help="prefill the --cache file belongs to")
    p.add_argument("--f", help="comma-separated budget fractions (overrides config)")
    p.add_argument("--l-gen", type=float)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("budget", parents=[common], help="budget-matched retrieval table")
    p.add_argument("--n", type=int, help="prefill length")
    p.add_argument("--d-h", type=int)
    p.add_argument("--d-phi", type=int)
    p.add_argument("--f", help="comma-separated budget fractions")
    p.add_argument("--l-gen", help="comma-separated L_gen values (inf allowed)")
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("tradeoff", parents=[common], help="break-even map from timing components")
    p.add_argument("--components")
    p.add_argument("--synthetic", action="store_true", help="use the built-in linear timing model")
    p.set_defaults(func=cmd_tradeoff)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except InfeasibleBudgetError as exc:
        print(f"infeasible budget: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
