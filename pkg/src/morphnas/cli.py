"""Command-line surface: search, distance, kernel, morph, export.

Human-readable output goes to stdout; machine artifacts go to files.  Exit
codes: 0 success, 2 configuration or input error, 3 evaluator failure
(state persisted), 4 illegal morph operation.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from morphnas import search as searchmod
from morphnas.evaluators import ExternalEvaluator, SyntheticEvaluator
from morphnas.graph import ArchGraph, GraphParseError, InvalidGraphError
from morphnas.kernel import kernel_matrix, layers_edit_distance, skips_edit_distance
from morphnas.morph import MorphError, apply_sequence, op_from_json
from morphnas.search import SearchConfig, SearchError, SearchLoadError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_EVALUATOR = 3
EXIT_MORPH = 4


def _load_graph(path: str) -> ArchGraph:
    with open(path) as fh:
        return ArchGraph.from_json(fh.read())


def _make_evaluator(spec):
    if spec == "oracle":
        return SyntheticEvaluator()
    if isinstance(spec, dict) and isinstance(spec.get("command"), list):
        return ExternalEvaluator(spec["command"], timeout=spec.get("timeout"))
    raise ValueError(f"evaluator must be \"oracle\" or {{\"command\": [...]}}, got {spec!r}")


def cmd_search(args) -> int:
    quiet = args.quiet
    try:
        if args.resume:
            state = searchmod.load_state(args.resume)
            if args.evals is not None:
                state.config.eval_budget = state.evals_done + args.evals
            if args.out:
                state.config.output_dir = args.out
            evaluator = _make_evaluator(state.config.evaluator)
        else:
            if not args.config:
                print("error: --config is required unless resuming", file=sys.stderr)
                return EXIT_CONFIG
            with open(args.config) as fh:
                doc = json.load(fh)
            config = SearchConfig.from_json_dict(doc)
            if args.seed is not None:
                config.rng_seed = args.seed
            if args.out:
                config.output_dir = args.out
            if args.evals is not None:
                config.eval_budget = args.evals
            if not config.output_dir:
                print("error: an output directory is required (--out)", file=sys.stderr)
                return EXIT_CONFIG
            evaluator = _make_evaluator(config.evaluator)
    except (OSError, json.JSONDecodeError, ValueError, SearchLoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    header_printed = False

    def report(state, cand, res, rec):
        nonlocal header_printed
        if quiet:
            return
        if not header_printed:
            print(f"{'step':>4}  {'arch':>5}  {'cost':>8}  {'best':>8}  {'alpha':>9}  {'parent':>6}  {'time_s':>7}")
            header_printed = True
        best = min(r.cost for r in state.history)
        cost = f"{res.cost:.4f}" if res.cost is not None else res.status
        alpha = f"{cand.alpha:+.4f}" if cand.alpha is not None else "-"
        parent = cand.parent_id if cand.parent_id is not None else "-"
        print(
            f"{state.evals_done:>4}  {cand.arch_id:>5}  {cost:>8}  {best:>8.4f}  "
            f"{alpha:>9}  {parent:>6}  {state.elapsed_s:>7.1f}"
        )

    if args.resume is None:
        state = None
    try:
        if state is None:
            state = searchmod.new_search(config, evaluator)
            if not quiet:
                seed_rec = state.history[0]
                print(f"seed architecture evaluated: cost {seed_rec.cost:.4f}")
        state = searchmod.run(state, evaluator, pipeline=not args.sequential, step_callback=report)
    except KeyboardInterrupt:
        if state is not None and state.config.output_dir:
            searchmod.save_state(state)
        print("interrupted; state persisted", file=sys.stderr)
        return 130
    except SearchError as exc:
        try:
            if state is not None and state.config.output_dir:
                searchmod.save_state(state)
        except Exception:  # noqa: BLE001 - persistence is best-effort here
            pass
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EVALUATOR
    finally:
        evaluator.close()

    _write_plot_csv(state)
    if not quiet:
        best = state.best_record()
        print(f"done: {len(state.history)} architectures, best cost {best.cost:.4f} (arch {best.arch_id})")
    return EXIT_OK


def _write_plot_csv(state) -> None:
    out = state.config.output_dir
    if not out:
        return
    path = os.path.join(out, "plot.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "arch_id", "cost", "best_cost", "elapsed_s"])
        best = float("inf")
        for step, rec in enumerate(state.history):
            best = min(best, rec.cost)
            writer.writerow([step, rec.arch_id, f"{rec.cost:.6f}", f"{best:.6f}", f"{rec.wall_time:.3f}"])


def cmd_distance(args) -> int:
    try:
        ga = _load_graph(args.arch_a)
        gb = _load_graph(args.arch_b)
    except (OSError, GraphParseError, InvalidGraphError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    dl = layers_edit_distance(ga.main_chain_widths(), gb.main_chain_widths())
    ds = skips_edit_distance(ga.skip_set(), gb.skip_set())
    print(f"D_l = {dl:.6f}")
    print(f"D_s = {ds:.6f}")
    print(f"d = {dl + args.lam * ds:.6f}")
    return EXIT_OK


def _normalize(matrix: np.ndarray) -> np.ndarray:
    lo, hi = matrix.min(), matrix.max()
    if hi == lo:
        return np.ones_like(matrix)
    return 2.0 * (matrix - lo) / (hi - lo) - 1.0


def cmd_kernel(args) -> int:
    try:
        state = searchmod.load_state(args.run_dir)
    except SearchLoadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not state.history:
        print("error: run directory holds no evaluated architectures", file=sys.stderr)
        return EXIT_CONFIG
    K = _normalize(kernel_matrix(state.dist_state.embed))
    costs = np.array([rec.cost for rec in state.history])
    P = _normalize(-np.abs(costs[:, None] - costs[None, :]))
    for name, matrix in (("K.csv", K), ("P.csv", P)):
        path = os.path.join(args.run_dir, name)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in matrix:
                writer.writerow([f"{v:.9f}" for v in row])
    mse = float(np.mean((K - P) ** 2))
    print(f"MSE = {mse:.6f}")
    return EXIT_OK


def cmd_morph(args) -> int:
    try:
        g = _load_graph(args.arch)
        with open(args.ops) as fh:
            doc = json.load(fh)
        if not isinstance(doc, list):
            raise ValueError("ops file must hold a JSON array of operations")
        ops = [op_from_json(entry) for entry in doc]
    except (OSError, json.JSONDecodeError, ValueError, GraphParseError, InvalidGraphError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        morphed = apply_sequence(g, ops)
    except MorphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MORPH
    out = args.out or "morphed.json"
    with open(out, "w") as fh:
        fh.write(morphed.to_json())
        fh.write("\n")
    if not args.quiet:
        print(f"wrote {out}")
    return EXIT_OK


def cmd_export(args) -> int:
    try:
        state = searchmod.load_state(args.run_dir)
    except SearchLoadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not state.history:
        print("error: run directory holds no evaluated architectures", file=sys.stderr)
        return EXIT_CONFIG
    if args.id is None:
        rec = state.best_record()
    else:
        matches = [r for r in state.history if r.arch_id == args.id]
        if not matches:
            print(f"error: no architecture with id {args.id}", file=sys.stderr)
            return EXIT_CONFIG
        rec = matches[0]
    out = args.out or f"arch_{rec.arch_id}.json"
    with open(out, "w") as fh:
        fh.write(rec.graph.to_json())
        fh.write("\n")
    g = rec.graph
    if args.quiet:
        return EXIT_OK
    print(f"exported arch {rec.arch_id} to {out}")
    print(f"cost = {rec.cost:.6f}")
    print(f"main chain widths = {list(g.main_chain_widths())}")
    print(f"skips = {len(g.skip_set())}")
    print(f"estimated bytes (batch 1) = {g.estimate_memory(1)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morphnas", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run or resume an architecture search")
    p.add_argument("--config", help="JSON search configuration")
    p.add_argument("--out", help="output directory")
    p.add_argument("--resume", help="resume from a previous output directory")
    p.add_argument("--evals", type=int, help="evaluation budget (additional when resuming)")
    p.add_argument("--seed", type=int, help="override the configured rng seed")
    p.add_argument("--sequential", action="store_true", help="disable generation/evaluation pipelining")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("distance", help="edit distance between two architecture files")
    p.add_argument("arch_a")
    p.add_argument("arch_b")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("kernel", help="emit kernel and performance-similarity matrices for a run")
    p.add_argument("run_dir")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_kernel)

    p = sub.add_parser("morph", help="apply a morph-op sequence to an architecture file")
    p.add_argument("arch")
    p.add_argument("ops")
    p.add_argument("--out")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_morph)

    p = sub.add_parser("export", help="export an architecture from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--id", type=int)
    p.add_argument("--out")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_export)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
