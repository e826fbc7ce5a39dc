"""Command-line entry point: ``capevo run`` and ``capevo inspect``."""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path
from typing import Sequence

from .config import EXPERIMENTS, load_plan
from .driver import ExperimentResults, run_experiment
from .errors import CapevoError, SnapshotMissing
from .governance import read_jsonl
from .registry import Registry

OUT_ENV = "CAPEVO_OUT"


def _summary(res: ExperimentResults) -> str:
    lines = []
    for label, ms in res.metrics.items():
        first, last = ms[0], ms[-1]
        lines.append(f"{label:<32} it0 {first.success_pct:6.2f}%  it{last.iteration} {last.success_pct:6.2f}%  "
                     f"var {last.variance:8.3f}  drift {last.policy_drift:.4f}")
    for row in res.final_rows:
        extra = ""
        if "cohens_d_vs_ours" in row:
            extra = f"  d {row['cohens_d_vs_ours']:.3f}  p {row.get('welch_p', float('nan')):.3g}"
        lines.append(f"final {row['method']:<26} {row['final_success_pct']:6.2f}%{extra}")
    for row in res.safety_rows:
        lines.append(f"{row['arm']:<32} unsafe {row['unsafe_executed']} ({row['unsafe_action_pct']:.2f}% of actions)"
                     f"  blocked {row['blocked']}/{row['violating_proposals']}")
    for k, v in sorted(res.timing.items()):
        if k.endswith("mediation_mean_ms"):
            lines.append(f"{k:<40} {v:.4f} ms")
    return "\n".join(lines)


def cmd_run(args: argparse.Namespace) -> int:
    plan = load_plan(args.config)
    changes = {}
    if args.seed is not None:
        changes["master_seed"] = args.seed
    if args.experiment:
        changes["experiments"] = tuple(EXPERIMENTS if args.experiment == ["all"] else args.experiment)
    if args.workers is not None:
        changes["workers"] = args.workers
    if changes:
        plan = dataclasses.replace(plan, **changes)
    arms = (False,) if args.no_enforcement else (True, False)
    out = args.out or os.environ.get(OUT_ENV)
    if not out:
        raise CapevoError(f"no output directory: pass --out or set {OUT_ENV}")
    res = run_experiment(plan, out, enforcement_arms=arms)
    print(_summary(res))
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    root = Path(args.registry)
    if not (root / "manifest.json").is_file():
        raise SnapshotMissing(f"no registry snapshot at {root}")
    reg = Registry.load(root)
    ids = reg.ecm_ids()
    if args.ecm_id is not None:
        if args.ecm_id not in ids:
            print(f"error: unknown ECM {args.ecm_id!r}", file=sys.stderr)
            return 2
        ids = [args.ecm_id]
    gates: dict[tuple[str, int], dict] = {}
    gate_file = Path(args.gates) if args.gates else root.parent.parent / "gates" / f"{root.name}.jsonl"
    if gate_file.is_file():
        for row in read_jsonl(gate_file):
            gates[(row["ecm_id"], row["candidate_version"])] = row
    for eid in ids:
        print(f"{eid} ({reg.kind_of(eid).value}) deployed v{reg.deployed_version(eid)}"
              f"{' [deprecated]' if reg.is_deprecated(eid) else ''}")
        for rec in reg.versions(eid):
            g = gates.get((eid, rec.version))
            note = ""
            if g is not None:
                note = (f"  gate it{g['iteration']}: {g['holdout_success_candidate']:.2f} vs "
                        f"{g['holdout_success_incumbent']:.2f} -> {'pass' if g['decision'] else 'reject'}")
            print(f"  v{rec.version} {rec.lifecycle_state.value:<10} {rec.params.to_dict()}{note}")
        for e in reg.events(eid):
            print(f"  event #{e.seq} it{e.iteration} {e.op} v{e.version} {e.detail}".rstrip())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capevo", description="Capability evolution experiments")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run experiments from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help=f"output directory (default: ${OUT_ENV})")
    r.add_argument("--seed", type=int, help="override the master seed")
    r.add_argument("--experiment", action="append", choices=(*EXPERIMENTS, "all"),
                   help="experiment to run; repeatable")
    r.add_argument("--workers", type=int)
    r.add_argument("--no-enforcement", action="store_true", help="safety experiment: run only the unenforced arm")
    r.set_defaults(func=cmd_run)
    i = sub.add_parser("inspect", help="print the version history of a registry snapshot")
    i.add_argument("registry", help="registry snapshot directory, e.g. results/registry/ours")
    i.add_argument("ecm_id", nargs="?")
    i.add_argument("--gates", help="gate report JSON-Lines file (default: inferred from the run layout)")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CapevoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
