"""Experiment configuration, orchestration and verification helpers behind the CLI."""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .diffnet import (
    APPNP,
    GCN2,
    SGC,
    BackboneKind,
    TrainConfig,
    ce_loss,
    forward,
    glorot_init,
    normalize_raw,
    raw_graph_hypergrad,
)
from .errors import ConfigError, DataError
from .evaluate import RunReport, eval_downstream
from .graph import Graph, LabelSet, load_graph, make_folds, graph_delta, save_graph, write_delta
from .lowrank import LowRankConfig, LowRankDelta, lr_hypergrad, lr_propagate, lr_sanitize, write_factors
from .perturb import AuditScores, read_attack, score_audit, undo_attack
from .sanitizer import (
    VARIANTS,
    SanitizeConfig,
    aggregate_folds,
    calibrate_symmetric,
    fold_hypergrad,
    run_folds,
    sanitize,
    score_matrix,
)
from .seeds import derive_seed

# key -> (parser, default). Keys double as long CLI flags with '-' for '_'.
_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _bool(text: str) -> bool:
    try:
        return _BOOL[text.strip().lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {text!r}") from None


SCHEMA = {
    "graph": (str, None),
    "out": (str, None),
    "seed": (int, 0),
    "variant": (str, "dt"),
    "modify_topology": (str, None),
    "modify_features": (str, None),
    "backbone": (str, "gcn"),
    "downstream": (str, None),
    "hidden": (int, None),
    "sgc_k": (int, 2),
    "alpha": (float, 0.1),
    "k_prop": (int, 10),
    "folds": (int, 8),
    "steps": (int, 10),
    "rate_topo": (float, 0.1),
    "rate_fea": (float, 0.001),
    "T": (int, 200),
    "P": (int, 196),
    "lr": (float, 0.01),
    "weight_decay": (float, 5e-4),
    "optimizer": (str, "adam"),
    "inclusive_truncation": (_bool, False),
    "n_seeds": (int, 10),
    "rank": (int, 32),
    "lr_delta": (float, 0.01),
    "lr_steps": (int, 10),
    "lr_normalize": (_bool, True),
    "prune": (float, 1e-3),
    "classes": (int, None),
    "per_class": (int, 20),
    "timing": (_bool, True),
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = coerce(key, value, f"{source}:{lineno}")
    return out


def coerce(key: str, value, where: str = ""):
    parser = SCHEMA[key][0]
    if not isinstance(value, str):
        return value
    try:
        return parser(value)
    except ValueError:
        raise ConfigError(f"{where + ': ' if where else ''}bad value for {key}: {value!r}") from None


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then config-file values, then explicit overrides."""
    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    for layer in (file_values or {}, overrides or {}):
        for key, value in layer.items():
            if value is not None:
                cfg[key] = coerce(key, value)
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


def make_backbone(name: str, cfg: dict) -> BackboneKind:
    name = name.lower()
    try:
        if name == "sgc":
            return SGC(k=cfg["sgc_k"])
        if name in ("gcn", "gcn2"):
            return GCN2(hidden=cfg["hidden"] or 16)
        if name == "appnp":
            return APPNP(alpha=cfg["alpha"], k_prop=cfg["k_prop"], hidden=cfg["hidden"] or 64)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    raise ConfigError(f"unknown backbone {name!r}")


def make_train(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(
            T=cfg["T"],
            P=cfg["P"],
            lr=cfg["lr"],
            weight_decay=cfg["weight_decay"],
            optimizer=cfg["optimizer"],
            seed=cfg["seed"],
            inclusive_truncation=cfg["inclusive_truncation"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def make_sanitize_config(cfg: dict) -> SanitizeConfig:
    variant = cfg["variant"].lower()
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS) + ['lr']}")
    topo, fea = VARIANTS[variant]
    return SanitizeConfig(
        modify_topology=cfg["modify_topology"] or topo,
        modify_features=cfg["modify_features"] or fea,
        rate_topo=cfg["rate_topo"],
        rate_fea=cfg["rate_fea"],
        steps=cfg["steps"],
        K=cfg["folds"],
        train=make_train(cfg),
        backbone=make_backbone(cfg["backbone"], cfg),
        master_seed=cfg["seed"],
    )


def make_lowrank_config(cfg: dict) -> LowRankConfig:
    return LowRankConfig(
        rank=cfg["rank"],
        lr_delta=cfg["lr_delta"],
        lr_steps=cfg["lr_steps"],
        K=cfg["folds"],
        train=make_train(cfg),
        backbone=make_backbone(cfg["backbone"], cfg),
        master_seed=cfg["seed"],
        normalize=cfg["lr_normalize"],
        prune=cfg["prune"],
    )


def write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def open_graph(cfg: dict) -> tuple[Graph, LabelSet]:
    if not cfg["graph"]:
        raise ConfigError("no graph directory given")
    return load_graph(cfg["graph"], classes=cfg["classes"], per_class=cfg["per_class"])


def evaluate(g: Graph, labels: LabelSet, cfg: dict) -> RunReport:
    kind = make_backbone(cfg["downstream"] or cfg["backbone"], cfg)
    return eval_downstream(g, labels, kind, make_train(cfg), cfg["n_seeds"], cfg["seed"], timing=cfg["timing"])


def run_sanitizer(g: Graph, labels: LabelSet, cfg: dict, out: Path):
    """Run the configured sanitizer and write graph/, delta.tsv and audit.jsonl under ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    if cfg["variant"].lower() == "lr":
        modified, delta, audit = lr_sanitize(g, labels, make_lowrank_config(cfg), timing=cfg["timing"])
        write_factors(delta, out)
    else:
        modified, audit = sanitize(g, labels, make_sanitize_config(cfg), timing=cfg["timing"])
    save_graph(modified, labels, out / "graph")
    write_delta(graph_delta(modified, g), out / "delta.tsv")
    write_jsonl(audit, out / "audit.jsonl")
    return modified, audit


def validate(cfg: dict) -> None:
    """Build every config object up front so invalid settings fail before any work."""
    if cfg["variant"].lower() == "lr":
        make_lowrank_config(cfg)
    else:
        make_sanitize_config(cfg)
    make_backbone(cfg["downstream"] or cfg["backbone"], cfg)
    if cfg["n_seeds"] < 1:
        raise ConfigError("n_seeds must be >= 1")


def run_experiment(cfg: dict) -> tuple[RunReport, RunReport]:
    """Evaluate, sanitize, evaluate again; write everything under ``cfg['out']``."""
    validate(cfg)
    if not cfg["out"]:
        raise ConfigError("no output directory given")
    out = Path(cfg["out"])
    g, labels = open_graph(cfg)
    before = evaluate(g, labels, cfg)
    modified, _ = run_sanitizer(g, labels, cfg, out)
    after = evaluate(modified, labels, cfg)
    echo = {k: v for k, v in cfg.items() if k not in ("out",)}
    for report in (before, after):
        report.config["experiment"] = echo
    attack = Path(cfg["graph"]) / "attack.tsv"
    if attack.exists():
        shutil.copyfile(attack, out / "attack.tsv")
    (out / "report_before.json").write_text(before.to_json(), encoding="utf-8")
    (out / "report_after.json").write_text(after.to_json(), encoding="utf-8")
    return before, after


def audit_scores(benign: Graph, poisoned: Graph, labels: LabelSet, cfg: SanitizeConfig) -> AuditScores:
    """One K-fold hyper-gradient pass on the poisoned graph, then the three mean scores."""
    plan = make_folds(labels, cfg.K, derive_seed(cfg.master_seed, 0xF01D))
    grads = run_folds(
        lambda k: fold_hypergrad(cfg, poisoned, labels, *plan.split(k), derive_seed(cfg.master_seed, 0, k)), cfg.K
    )
    S = score_matrix(calibrate_symmetric(aggregate_folds(grads).dA), poisoned)
    return score_audit(benign, poisoned, S)


def benign_for(poisoned_dir, poisoned: Graph, benign_dir=None, cfg: dict | None = None) -> Graph:
    if benign_dir:
        return load_graph(benign_dir, classes=(cfg or {}).get("classes"))[0]
    attack = Path(poisoned_dir) / "attack.tsv"
    if not attack.exists():
        raise DataError("need --benign or an attack.tsv next to the poisoned graph")
    return undo_attack(poisoned, read_attack(attack))


# --------------------------------------------------------------------------
# gradient check


@dataclass
class GradcheckRow:
    target: str
    max_rel_err: float
    passed: bool


@dataclass
class GradcheckResult:
    n: int
    backbone: str
    rows: list[GradcheckRow]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def table(self) -> str:
        lines = [f"gradcheck n={self.n} backbone={self.backbone} tol={self.tolerance:g}"]
        lines.append(f"{'target':<8}{'max_rel_err':>14}  status")
        for r in self.rows:
            lines.append(f"{r.target:<8}{r.max_rel_err:>14.3e}  {'PASS' if r.passed else 'FAIL'}")
        lines.append("overall: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4, atol: float = 1e-8) -> float:
    """Largest ``|a - f| / max(|f|, atol / rtol)``; below ``rtol`` means within (rtol, atol)."""
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), atol / rtol)))


def central_difference(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        out[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return out


def random_instance(n: int, seed: int, d: int = 4, c: int = 3, p: float = 0.3):
    rng = np.random.default_rng(seed)
    A = np.triu((rng.random((n, n)) < p).astype(float), 1)
    A = A + A.T
    X = rng.standard_normal((n, d))
    y = np.arange(n) % c
    rng.shuffle(y)
    valid = np.sort(rng.choice(n, size=max(2, n // 2), replace=False))
    return A, X, y, valid, rng


def gradcheck(n: int = 10, backbone: str | BackboneKind = "sgc", seed: int = 0, rank: int = 2, h: float = 1e-5) -> GradcheckResult:
    """Compare analytic graph and low-rank hyper-gradients with central differences."""
    if n > 16:
        raise ConfigError("gradcheck is meant for n <= 16")
    kind = backbone if isinstance(backbone, BackboneKind) else make_backbone(backbone, resolve())
    A, X, y, valid, rng = random_instance(n, seed)
    c = int(y.max()) + 1
    W = glorot_init(kind.shapes(X.shape[1], c), rng)

    def loss_dense(A_, X_):
        P, _ = normalize_raw(sp.csr_matrix(A_ + np.eye(n)))
        return ce_loss(forward(kind, P, X_, W), y, valid)

    gg = raw_graph_hypergrad(kind, A, X, [W], y, valid)
    fd_A = central_difference(lambda A_: loss_dense(A_, X), A, h)
    fd_X = central_difference(lambda X_: loss_dense(A, X_), X, h)

    g = Graph.from_dense(A, X)
    delta = LowRankDelta(0.1 * rng.standard_normal((n, rank)), 0.1 * rng.standard_normal((n, rank)))
    dU, dV = lr_hypergrad(kind, g, delta, [W], y, valid)
    fd_U = central_difference(lambda U: ce_loss(lr_propagate(kind, g, LowRankDelta(U, delta.V), X, W), y, valid), delta.U, h)
    fd_V = central_difference(lambda V: ce_loss(lr_propagate(kind, g, LowRankDelta(delta.U, V), X, W), y, valid), delta.V, h)

    tol = 1e-4
    rows = []
    for name, a, f in (("dA", gg.dA, fd_A), ("dX", gg.dX, fd_X), ("dU", dU, fd_U), ("dV", dV, fd_V)):
        err = rel_error(a, f)
        rows.append(GradcheckRow(name, err, bool(err < tol)))
    return GradcheckResult(n=n, backbone=kind.name, rows=rows, tolerance=tol)
