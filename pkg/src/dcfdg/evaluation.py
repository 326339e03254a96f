"""Accuracy and interventional fairness metrics, model selection, λ_f sweeps,
and a discrete structural causal model with exact enumeration for auditing
the metric estimators."""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .data import DomainData, DomainStore, split_domains
from .errors import ConfigError, DataError
from .model import DCFDGModel, counterfactual_predict
from .train import TrainConfig, apply_ablation, restore, to_batch, train_dcfdg


class CounterfactualPredictor(Protocol):
    def counterfactual_predict(self, domain: DomainData, intervene_a: int) -> np.ndarray:
        """B×2 class probabilities under do(A = intervene_a)."""


class ModelPredictor:
    """Adapter exposing a trained model through the predictor protocol."""

    def __init__(self, model: DCFDGModel):
        self.model = model

    def counterfactual_predict(self, domain: DomainData, intervene_a: int) -> np.ndarray:
        return counterfactual_predict(self.model, to_batch(domain), intervene_a)


def as_predictor(model) -> CounterfactualPredictor:
    return ModelPredictor(model) if isinstance(model, DCFDGModel) else model


def interventional_positive(model, domain: DomainData) -> tuple[np.ndarray, np.ndarray]:
    """Per-row P(Ŷ=1 | do(A=1)) and P(Ŷ=1 | do(A=0))."""
    if len(domain) == 0:
        raise DataError(f"domain {domain.t} is empty")
    pred = as_predictor(model)
    return pred.counterfactual_predict(domain, 1)[:, 1], pred.counterfactual_predict(domain, 0)[:, 1]


def accuracy(model, domain: DomainData) -> float:
    if len(domain) == 0:
        raise DataError(f"cannot score empty domain {domain.t}")
    pred = as_predictor(model)
    p1, p0 = pred.counterfactual_predict(domain, 1), pred.counterfactual_predict(domain, 0)
    factual = np.where(domain.a[:, None] == 1, p1, p0)
    return float(np.mean(factual.argmax(axis=1) == domain.y))


def tce(model, domain: DomainData) -> float:
    p1, p0 = interventional_positive(model, domain)
    return float(abs(p1.mean() - p0.mean()))


@dataclass(frozen=True)
class ContextSpec:
    """Two discrete context columns; ``values`` optionally fixes each column's levels."""

    columns: tuple[str, str]
    values: tuple[tuple, tuple] | None = None

    def __post_init__(self):
        if len(self.columns) != 2:
            raise ConfigError(f"context needs exactly two columns, got {self.columns}")


class EmptySubgroupError(DataError):
    def __init__(self, cell: str):
        super().__init__(f"context cell {cell} has no rows")
        self.cell = cell


def _context_column(domain: DomainData, name: str, store: DomainStore | None) -> np.ndarray:
    if name in domain.context:
        col = np.asarray(domain.context[name])
    elif name == "a":
        col = domain.a
    elif name == "y":
        col = domain.y
    elif store is not None and name in store.xs_names:
        col = domain.x_s[:, store.xs_names.index(name)]
    elif store is not None and name in store.xns_names:
        col = domain.x_ns[:, store.xns_names.index(name)]
    else:
        raise ConfigError(f"context column {name!r} not found in domain {domain.t}")
    if col.dtype.kind == "f":
        if not np.all(np.isfinite(col)) or not np.all(col == np.round(col)):
            raise ConfigError(f"context column {name!r} is continuous; counterfactual effect needs discrete context")
        col = col.astype(np.int64)
    return col


def ce(model, domain: DomainData, ctx: ContextSpec, store: DomainStore | None = None) -> dict[str, float | EmptySubgroupError]:
    """CE(o) = |mean P(Ŷ=1|do(A=1)) − mean P(Ŷ=1|do(A=0))| within each context cell.

    Cells are keyed ``o_ij``; an empty cell maps to an :class:`EmptySubgroupError`.
    """
    c1 = _context_column(domain, ctx.columns[0], store)
    c2 = _context_column(domain, ctx.columns[1], store)
    levels = ctx.values or (tuple(np.unique(c1).tolist()), tuple(np.unique(c2).tolist()))
    p1, p0 = interventional_positive(model, domain)
    out: dict[str, float | EmptySubgroupError] = {}
    for i, j in itertools.product(*levels):
        key = f"o_{i}{j}"
        mask = (c1 == i) & (c2 == j)
        if not mask.any():
            out[key] = EmptySubgroupError(key)
            continue
        out[key] = float(abs(p1[mask].mean() - p0[mask].mean()))
    return out


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    """Per-target-domain metrics for one or more seeds (rows = seeds, columns = domains).

    Values are stored unscaled; ``scale10`` only affects presentation.
    """

    domains: list[int]
    acc: np.ndarray
    tce: np.ndarray
    ce: dict[str, np.ndarray] = field(default_factory=dict)
    label: str = "DCFDG"
    scale10: bool = True

    def __post_init__(self):
        self.acc = np.atleast_2d(np.asarray(self.acc, dtype=float))
        self.tce = np.atleast_2d(np.asarray(self.tce, dtype=float))
        self.ce = {k: np.atleast_2d(np.asarray(v, dtype=float)) for k, v in self.ce.items()}

    @property
    def n_seeds(self) -> int:
        return self.acc.shape[0]

    @property
    def acc_mean(self) -> float:
        return float(self.acc.mean())

    @property
    def tce_mean(self) -> float:
        return float(self.tce.mean())

    @property
    def acc_std(self) -> float:
        """Std over seeds of the per-seed mean over target domains."""
        return float(self.acc.mean(axis=1).std())

    @property
    def tce_std(self) -> float:
        return float(self.tce.mean(axis=1).std())

    def ce_mean(self) -> dict[str, float]:
        return {k: float(np.nanmean(v)) if np.isfinite(v).any() else float("nan") for k, v in self.ce.items()}

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "domains": list(self.domains),
            "acc": self.acc.tolist(),
            "tce": self.tce.tolist(),
            "ce": {k: v.tolist() for k, v in self.ce.items()},
            "acc_mean": self.acc_mean,
            "acc_std": self.acc_std,
            "tce_mean": self.tce_mean,
            "tce_std": self.tce_std,
            "ce_mean": self.ce_mean(),
            "display_scale_tce_ce": 10 if self.scale10 else 1,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        return cls(d["domains"], np.array(d["acc"]), np.array(d["tce"]),
                   {k: np.array(v) for k, v in d.get("ce", {}).items()}, d.get("label", "DCFDG"),
                   d.get("display_scale_tce_ce", 10) == 10)

    def table_row(self) -> dict[str, float | str]:
        s = 10.0 if self.scale10 else 1.0
        row: dict[str, float | str] = {"method": self.label, "Acc": 100.0 * self.acc_mean, "TCE": s * self.tce_mean}
        for k, v in sorted(self.ce_mean().items()):
            row[f"CE_{k}"] = s * v
        return row

    def curve_rows(self) -> list[dict]:
        return [
            {"t": t, "acc": float(self.acc[:, j].mean()), "acc_std": float(self.acc[:, j].std()),
             "tce": float(self.tce[:, j].mean()), "std": float(self.tce[:, j].std())}
            for j, t in enumerate(self.domains)
        ]


def write_table(reports: Sequence[MetricsReport], path=None) -> str:
    """Rows = methods/modes; columns Acc, TCE and CE cells (display-scaled)."""
    rows = [r.table_row() for r in reports]
    cols = ["method", "Acc", "TCE"] + sorted({k for r in rows for k in r if k.startswith("CE_")})
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.4f}" if isinstance(r.get(k), float) else r.get(k, "")) for k in cols})
    if path is not None:
        Path(path).write_text(buf.getvalue())
    return buf.getvalue()


def write_curves(report: MetricsReport, path=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["t", "acc", "acc_std", "tce", "std"], lineterminator="\n")
    w.writeheader()
    for r in report.curve_rows():
        w.writerow(r)
    if path is not None:
        Path(path).write_text(buf.getvalue())
    return buf.getvalue()


def evaluate(model, domains: Sequence[DomainData], ctx: ContextSpec | None = None,
             store: DomainStore | None = None, label: str = "DCFDG") -> MetricsReport:
    accs = [accuracy(model, d) for d in domains]
    tces = [tce(model, d) for d in domains]
    cells: dict[str, list[float]] = {}
    if ctx is not None:
        per_domain = [ce(model, d, ctx, store) for d in domains]
        keys = sorted({k for m in per_domain for k in m})
        for k in keys:
            cells[k] = [m[k] if isinstance(m.get(k), float) else float("nan") for m in per_domain]
    return MetricsReport([d.t for d in domains], [accs], [tces], {k: [v] for k, v in cells.items()}, label)


def merge_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Stack single-seed reports over the same target domains."""
    if not reports:
        raise ConfigError("nothing to merge")
    first = reports[0]
    for r in reports[1:]:
        if list(r.domains) != list(first.domains):
            raise ConfigError("reports cover different domains")
    keys = sorted({k for r in reports for k in r.ce})
    nan = np.full(len(first.domains), np.nan)
    return MetricsReport(
        list(first.domains),
        np.concatenate([r.acc for r in reports]),
        np.concatenate([r.tce for r in reports]),
        {k: np.concatenate([r.ce.get(k, nan[None, :]) for r in reports]) for k in keys},
        first.label,
        first.scale10,
    )


# ---------------------------------------------------------------- selection & pipeline


def select_model(checkpoints: Sequence, intermediary: Sequence[DomainData]) -> int:
    """Index of the checkpoint with the best mean intermediary accuracy.

    Ties go to the lower mean intermediary TCE, then to the earlier checkpoint.
    """
    if not checkpoints:
        raise ConfigError("select_model needs at least one checkpoint")
    keys = []
    for i, m in enumerate(checkpoints):
        acc = float(np.mean([accuracy(m, d) for d in intermediary]))
        t = float(np.mean([tce(m, d) for d in intermediary]))
        keys.append((-acc, t, i))
    return min(keys)[2]


@dataclass
class RunOutcome:
    report: MetricsReport
    train_log: object
    selected: str
    model: DCFDGModel
    disc: object
    hyper: object = None


def run_experiment(store: DomainStore, cfg: TrainConfig, ctx: ContextSpec | None = None,
                   ratio=None, label: str | None = None) -> RunOutcome:
    """Split, train on source domains, select on intermediary, evaluate on target."""
    split = ratio or (1 / 2, 1 / 6, 1 / 3)
    source, mid, target = split_domains(store, split)
    result = train_dcfdg(source, cfg, store.xs_binary, store.xns_binary)
    candidates = [restore(result.model, result.disc, arr) for _, arr in result.snapshots]
    best = select_model([m for m, _ in candidates], mid)
    model, disc = candidates[best]
    report = evaluate(model, target, ctx, store, label or cfg.ablation_mode)
    hyper = apply_ablation(cfg.ablation_mode, cfg.hyper)[1]
    return RunOutcome(report, result.log, result.snapshots[best][0], model, disc, hyper)


def sweep_lambda_f(store: DomainStore, base: TrainConfig, grid: Sequence[float] = (0.02, 0.1, 0.2, 0.5, 1.0),
                   ctx: ContextSpec | None = None, seeds: Sequence[int] | None = None) -> list[tuple[float, MetricsReport]]:
    """One training run per (λ_f, seed); data and every other setting held fixed."""
    if not grid:
        raise ConfigError("λ_f grid is empty")
    seeds = list(seeds) if seeds is not None else [base.seed]
    out = []
    for lam in grid:
        reps = []
        for s in seeds:
            cfg = replace(base, seed=s, hyper=replace(base.hyper, lambda_f=float(lam)), checkpoint_path=None)
            reps.append(run_experiment(store, cfg, ctx, label=f"lambda_f={lam:g}").report)
        out.append((float(lam), merge_reports(reps)))
    return out


def write_sweep(results: Sequence[tuple[float, MetricsReport]], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lambda_f", "acc_mean", "acc_std", "tce_mean", "tce_std"])
    for lam, r in results:
        w.writerow([repr(lam), repr(r.acc_mean), repr(r.acc_std), repr(r.tce_mean), repr(r.tce_std)])
    if path is not None:
        Path(path).write_text(buf.getvalue())
    return buf.getvalue()


# ---------------------------------------------------------------- toy SCM


class ToySCM:
    """Binary SCM with enumerable noise for exact metric audits.

    U_A, U_X, U_Y are independent fair coins; A = U_A, X = A xor U_X,
    Y = (A and U_Y) xor U_X.  A classifier is a table h[x, a] = P(Ŷ=1 | X=x, A=a).
    """

    noise_support = tuple(itertools.product((0, 1), repeat=3))

    @staticmethod
    def f_a(u_a: int) -> int:
        return u_a

    @staticmethod
    def f_x(a: int, u_x: int) -> int:
        return a ^ u_x

    @staticmethod
    def f_y(a: int, u_x: int, u_y: int) -> int:
        return (a & u_y) ^ u_x

    def prob(self, u) -> float:
        return 0.5 ** len(u)

    def domain(self, t: int = 1) -> DomainData:
        """Every noise configuration once (uniform weights) as observed rows."""
        rows = []
        for u_a, u_x, u_y in self.noise_support:
            a = self.f_a(u_a)
            x = self.f_x(a, u_x)
            rows.append((a, x, self.f_y(a, u_x, u_y)))
        arr = np.array(rows)
        return DomainData(t, arr[:, 1:2].astype(float), np.zeros((len(arr), 0)), arr[:, 0], arr[:, 2],
                          {"X": arr[:, 1], "Y": arr[:, 2]})

    # exhaustive-enumeration ground truth

    def p_do(self, h: np.ndarray, a_do: int, cond=None) -> float:
        """P(Ŷ=1 | do(A=a_do)) [optionally given factual (X, Y) = cond]."""
        num = den = 0.0
        for u in self.noise_support:
            u_a, u_x, u_y = u
            a = self.f_a(u_a)
            if cond is not None and (self.f_x(a, u_x), self.f_y(a, u_x, u_y)) != tuple(cond):
                continue
            w = self.prob(u)
            num += w * h[self.f_x(a_do, u_x), a_do]
            den += w
        return num / den

    def true_tce(self, h: np.ndarray) -> float:
        return abs(self.p_do(h, 1) - self.p_do(h, 0))

    def true_ce(self, h: np.ndarray) -> dict[str, float]:
        return {f"o_{x}{y}": abs(self.p_do(h, 1, (x, y)) - self.p_do(h, 0, (x, y)))
                for x, y in itertools.product((0, 1), repeat=2)}


class ToyClassifier:
    """Counterfactual predictor for the toy SCM: abduct U_X from (X, A), then
    recompute X under the intervention and read the classifier table."""

    def __init__(self, scm: ToySCM, h: np.ndarray):
        self.scm, self.h = scm, np.asarray(h, dtype=float)

    def counterfactual_predict(self, domain: DomainData, intervene_a: int) -> np.ndarray:
        x = domain.x_s[:, 0].astype(np.int64)
        u_x = x ^ domain.a
        x_cf = np.array([self.scm.f_x(intervene_a, int(u)) for u in u_x])
        p1 = self.h[x_cf, intervene_a]
        return np.stack([1.0 - p1, p1], axis=1)
