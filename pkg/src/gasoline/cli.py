"""Command-line entry point: ``gasoline <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import harness
from .errors import ConfigError, DataError, GasolineError
from .graph import load_graph, save_graph
from .perturb import random_attack, sbm_generate, write_attack

# flags shared by every command that trains something; all default to None so
# that only explicitly given flags override config-file values
_SHARED = [
    ("--graph", str, "graph directory"),
    ("--out", str, "output directory"),
    ("--seed", int, "master seed"),
    ("--backbone", str, "sgc | gcn | appnp"),
    ("--downstream", str, "backbone used for evaluation (defaults to --backbone)"),
    ("--folds", int, "number of folds K"),
    ("--steps", int, "outer steps"),
    ("--rate-topo", float, "topology budget rate"),
    ("--rate-fea", float, "feature budget rate"),
    ("--variant", str, "dt | ct | df | cf | dtcf | lr"),
    ("--T", int, "training steps"),
    ("--P", int, "truncation point"),
    ("--lr", float, "backbone learning rate"),
    ("--hidden", int, "hidden width"),
    ("--rank", int, "low-rank r"),
    ("--lr-delta", float, "low-rank step size"),
    ("--lr-steps", int, "low-rank outer steps"),
    ("--n-seeds", int, "evaluation seeds"),
    ("--classes", int, "number of classes"),
]


def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    for flag, typ, text in _SHARED:
        p.add_argument(flag, type=typ, default=None, help=text, dest=flag[2:].replace("-", "_"))
    p.add_argument("--no-timing", dest="timing", action="store_const", const=False, default=None,
                   help="zero all wall-clock fields so reruns are byte-identical")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gasoline", description="Graph sanitation by hyper-gradient")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a planted-partition graph")
    gen.add_argument("--out", required=True)
    gen.add_argument("--n", type=int, default=200)
    gen.add_argument("--blocks", type=int, default=4)
    gen.add_argument("--p-in", type=float, default=0.10)
    gen.add_argument("--p-out", type=float, default=0.01)
    gen.add_argument("--labels-per-class", type=int, default=20)
    gen.add_argument("--feature-dim", type=int, default=32)
    gen.add_argument("--feature-noise", type=float, default=3.0)
    gen.add_argument("--seed", type=int, default=0)

    atk = sub.add_parser("attack", help="random edge-flip poisoning")
    atk.add_argument("--graph", required=True)
    atk.add_argument("--out", required=True)
    atk.add_argument("--rate", type=float, default=0.5)
    atk.add_argument("--seed", type=int, default=0)

    for name, text in (
        ("sanitize", "discrete or continuous sanitation"),
        ("lr-sanitize", "low-rank sanitation"),
        ("eval", "downstream accuracy over seeds"),
        ("run", "evaluate, sanitize, evaluate"),
    ):
        _add_shared(sub.add_parser(name, help=text))

    aud = sub.add_parser("audit", help="mean scores of poisoned versus benign entries")
    _add_shared(aud)
    aud.add_argument("--benign", help="benign graph directory (default: undo attack.tsv)")

    gc = sub.add_parser("gradcheck", help="analytic versus finite-difference gradients")
    gc.add_argument("--n", type=int, default=10)
    gc.add_argument("--backbone", default="sgc")
    gc.add_argument("--seed", type=int, default=0)
    return parser


def _resolve(args) -> dict:
    file_values = harness.load_config(args.config) if args.config else {}
    overrides = {k: getattr(args, k, None) for k in harness.SCHEMA}
    return harness.resolve(file_values, overrides)


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "gen":
        try:
            g, labels = sbm_generate(args.n, args.blocks, args.p_in, args.p_out, args.labels_per_class,
                                     args.feature_dim, args.feature_noise, args.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        save_graph(g, labels, args.out)
        print(f"wrote {args.out}: n={g.n} m={g.m} d={g.d}")
        return 0
    if cmd == "attack":
        g, labels = load_graph(args.graph)
        poisoned, record = random_attack(g, args.rate, args.seed)
        save_graph(poisoned, labels, args.out)
        write_attack(record, Path(args.out) / "attack.tsv")
        print(f"wrote {args.out}: {len(record.flips)} flips")
        return 0
    if cmd == "gradcheck":
        result = harness.gradcheck(args.n, args.backbone, args.seed)
        print(result.table())
        return 0 if result.passed else 1

    cfg = _resolve(args)
    if cmd == "sanitize":
        cfg["variant"] = cfg["variant"] if cfg["variant"] != "lr" else "dt"
    elif cmd == "lr-sanitize":
        cfg["variant"] = "lr"

    if cmd == "run":
        before, after = harness.run_experiment(cfg)
        print(f"before {before.mean:.4f} +- {before.std:.4f}  after {after.mean:.4f} +- {after.std:.4f}")
        return 0
    if cmd == "eval":
        harness.make_backbone(cfg["downstream"] or cfg["backbone"], cfg)
        g, labels = harness.open_graph(cfg)
        report = harness.evaluate(g, labels, cfg)
        text = report.to_json()
        if cfg["out"]:
            Path(cfg["out"]).mkdir(parents=True, exist_ok=True)
            (Path(cfg["out"]) / "report.json").write_text(text, encoding="utf-8")
        sys.stdout.write(text)
        return 0
    if cmd in ("sanitize", "lr-sanitize"):
        harness.validate(cfg)
        if not cfg["out"]:
            raise ConfigError("no output directory given")
        g, labels = harness.open_graph(cfg)
        _, audit = harness.run_sanitizer(g, labels, cfg, Path(cfg["out"]))
        print(f"wrote {cfg['out']}: {len(audit)} steps")
        return 0
    if cmd == "audit":
        scfg = harness.make_sanitize_config(cfg)
        poisoned, labels = harness.open_graph(cfg)
        benign = harness.benign_for(cfg["graph"], poisoned, args.benign, cfg)
        scores = harness.audit_scores(benign, poisoned, labels, scfg)
        print(json.dumps(asdict(scores), sort_keys=True))
        return 0
    raise DataError(f"unknown command {cmd}")  # argparse prevents this


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except GasolineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
