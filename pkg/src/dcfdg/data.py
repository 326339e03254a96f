"""Sequential-domain datasets: the FairCircle generator, tabular CSV ingestion,
source/intermediary/target splitting, z-scoring and Pearson correlations."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import multivariate_normal

from .errors import ConfigError, DataError

DEFAULT_SPLIT = (1 / 2, 1 / 6, 1 / 3)


@dataclass
class DomainData:
    """One domain's rows. ``a`` and ``y`` are 0/1 integer vectors."""

    t: int
    x_s: np.ndarray
    x_ns: np.ndarray
    a: np.ndarray
    y: np.ndarray
    context: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.x_s = np.asarray(self.x_s, dtype=float).reshape(len(self.y), -1)
        self.x_ns = np.asarray(self.x_ns, dtype=float).reshape(len(self.y), -1)
        self.a = np.asarray(self.a).astype(np.int64)
        self.y = np.asarray(self.y).astype(np.int64)
        if not (len(self.x_s) == len(self.x_ns) == len(self.a) == len(self.y)):
            raise DataError(f"domain {self.t}: row counts differ")

    def __len__(self) -> int:
        return len(self.y)

    def rows(self, idx) -> DomainData:
        return DomainData(self.t, self.x_s[idx], self.x_ns[idx], self.a[idx], self.y[idx],
                          {k: v[idx] for k, v in self.context.items()})


@dataclass
class DomainStore:
    domains: list[DomainData]
    xs_names: list[str]
    xns_names: list[str]
    xs_binary: list[bool]
    xns_binary: list[bool]
    norm: dict | None = None
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        ts = [d.t for d in self.domains]
        if ts != list(range(1, len(ts) + 1)):
            raise DataError(f"domain indices must run 1..T in order, got {ts}")
        for d in self.domains:
            if len(d) == 0:
                raise DataError(f"domain {d.t} has no rows")

    def __len__(self) -> int:
        return len(self.domains)

    @property
    def counts(self) -> list[int]:
        return [len(d) for d in self.domains]

    def fit_normalization(self, n_source: int) -> dict:
        """Column means/stds over the first ``n_source`` domains; binary columns pass through."""
        src = self.domains[:n_source]
        stats = {}
        for key, binary in (("x_s", self.xs_binary), ("x_ns", self.xns_binary)):
            x = np.concatenate([getattr(d, key) for d in src], axis=0)
            mu = x.mean(axis=0)
            sd = x.std(axis=0)
            sd = np.where(sd > 0, sd, 1.0)
            mask = np.asarray(binary, dtype=bool)
            mu[mask] = 0.0
            sd[mask] = 1.0
            stats[key] = {"mean": mu.tolist(), "std": sd.tolist()}
        stats["n_source"] = n_source
        return stats

    def normalized(self, n_source: int) -> DomainStore:
        stats = self.fit_normalization(n_source)
        mus = {k: np.asarray(stats[k]["mean"]) for k in ("x_s", "x_ns")}
        sds = {k: np.asarray(stats[k]["std"]) for k in ("x_s", "x_ns")}
        doms = [
            replace(d, x_s=(d.x_s - mus["x_s"]) / sds["x_s"], x_ns=(d.x_ns - mus["x_ns"]) / sds["x_ns"])
            for d in self.domains
        ]
        for d in doms:
            if not (np.isfinite(d.x_s).all() and np.isfinite(d.x_ns).all()):
                raise DataError(f"domain {d.t}: non-finite features after normalization")
        return replace(self, domains=doms, norm=stats)

    # ------------------------------------------------------------ serialization

    def manifest(self) -> dict:
        return {
            "n_domains": len(self.domains),
            "counts": self.counts,
            "xs_names": self.xs_names,
            "xns_names": self.xns_names,
            "xs_binary": self.xs_binary,
            "xns_binary": self.xns_binary,
            "context_columns": sorted(self.domains[0].context) if self.domains else [],
            "normalization": self.norm,
            "source": self.source,
        }

    def save(self, out_dir) -> list[Path]:
        """One CSV per domain (t, xs_*, xns_*, a, y, ctx_*) plus ``manifest.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for d in self.domains:
            cols = {"t": np.full(len(d), d.t)}
            for j, name in enumerate(self.xs_names):
                cols[f"xs_{name}"] = d.x_s[:, j]
            for j, name in enumerate(self.xns_names):
                cols[f"xns_{name}"] = d.x_ns[:, j]
            cols["a"] = d.a
            cols["y"] = d.y
            for name in sorted(d.context):
                cols[f"ctx_{name}"] = d.context[name]
            path = out / f"domain_{d.t:02d}.csv"
            pd.DataFrame(cols).to_csv(path, index=False, float_format="%.17g")
            written.append(path)
        mpath = out / "manifest.json"
        mpath.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))
        written.append(mpath)
        return written

    @classmethod
    def load(cls, in_dir) -> DomainStore:
        root = Path(in_dir)
        mpath = root / "manifest.json"
        if not mpath.exists():
            raise DataError(f"no manifest.json in {root}")
        man = json.loads(mpath.read_text())
        doms = []
        for t in range(1, man["n_domains"] + 1):
            df = pd.read_csv(root / f"domain_{t:02d}.csv", float_precision="round_trip")
            xs = df[[f"xs_{n}" for n in man["xs_names"]]].to_numpy(float)
            xns = df[[f"xns_{n}" for n in man["xns_names"]]].to_numpy(float)
            ctx = {c[4:]: df[c].to_numpy() for c in df.columns if c.startswith("ctx_")}
            doms.append(DomainData(t, xs, xns, df["a"].to_numpy(), df["y"].to_numpy(), ctx))
        return cls(doms, man["xs_names"], man["xns_names"], man["xs_binary"], man["xns_binary"],
                   man.get("normalization"), man.get("source", {}))


# ---------------------------------------------------------------- FairCircle


@dataclass
class FairCircleConfig:
    n_per_domain: int = 2000
    n_domains: int = 12
    radius_0: float = 25.0
    radius_1: float = 34.0
    phi_lo: float = math.pi / 8
    phi_hi: float = math.pi / 4
    arc_lo: float = 0.0
    arc_hi: float = math.pi / 2
    cov_0: tuple = ((10.0, 1.0), (1.0, 3.0))
    cov_1: tuple = ((5.0, 1.0), (1.0, 5.0))
    seed: int = 0

    def __post_init__(self):
        if self.radius_0 <= 0 or self.radius_1 <= 0:
            raise ConfigError("FairCircle radii must be positive")
        if not self.phi_lo < self.phi_hi:
            raise ConfigError(f"need phi_lo < phi_hi, got {self.phi_lo}, {self.phi_hi}")
        if self.n_per_domain < 1 or self.n_domains < 1:
            raise ConfigError("FairCircle needs at least one domain with one row")
        for cov in (self.cov_0, self.cov_1):
            c = np.asarray(cov, dtype=float)
            if c.shape != (2, 2) or not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() <= 0:
                raise ConfigError(f"covariance {cov} is not symmetric positive-definite")

    def domain_means(self) -> tuple[np.ndarray, np.ndarray]:
        """Class means for every domain, equally spaced along each arc."""
        angles = np.linspace(self.arc_lo, self.arc_hi, self.n_domains)
        unit = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return self.radius_0 * unit, self.radius_1 * unit


def rotation(phi: float) -> np.ndarray:
    return np.array([[math.cos(phi), -math.sin(phi)], [math.sin(phi), math.cos(phi)]])


def gen_faircircle(cfg: FairCircleConfig | None = None) -> DomainStore:
    cfg = cfg or FairCircleConfig()
    mu0s, mu1s = cfg.domain_means()
    cov0, cov1 = np.asarray(cfg.cov_0, float), np.asarray(cfg.cov_1, float)
    domains = []
    phis = []
    for t in range(1, cfg.n_domains + 1):
        rng = np.random.default_rng(cfg.seed ^ t)
        mu0, mu1 = mu0s[t - 1], mu1s[t - 1]
        phi = rng.uniform(cfg.phi_lo, cfg.phi_hi)
        y = rng.integers(0, 2, size=cfg.n_per_domain)
        x = np.empty((cfg.n_per_domain, 2))
        n1 = int(y.sum())
        x[y == 0] = rng.multivariate_normal(mu0, cov0, size=cfg.n_per_domain - n1)
        x[y == 1] = rng.multivariate_normal(mu1, cov1, size=n1)
        # x' = R(phi) [x_s; 1]
        xp = np.stack([x[:, 0], np.ones(len(x))], axis=1) @ rotation(phi).T
        log_ratio = multivariate_normal(mu1, cov1).logpdf(xp) - multivariate_normal(mu0, cov0).logpdf(xp)
        p_a = 0.5 * (1.0 + np.tanh(0.5 * log_ratio))
        a = (rng.random(cfg.n_per_domain) < p_a).astype(np.int64)
        domains.append(DomainData(t, x[:, :1], x[:, 1:], a, y))
        phis.append(phi)
    src = {"generator": "faircircle", "config": _jsonable(asdict(cfg)), "phi": phis,
           "mu_0": mu0s.tolist(), "mu_1": mu1s.tolist()}
    return DomainStore(domains, ["x1"], ["x2"], [False], [False], None, src)


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    return d


# ---------------------------------------------------------------- tabular CSV


@dataclass
class DatasetSpec:
    """Column roles for a tabular CSV.

    ``label`` / ``sensitive`` map a column to 0/1 via ``positive`` (values coded
    1) or ``threshold`` (values strictly above coded 1).  ``categorical`` maps a
    column to its ordered category list for one-hot encoding.  ``domain_key``
    bins a column into ordered domains (``rule`` is ``quantile`` or
    ``equal_width``).  ``context`` lists columns carried verbatim (after the
    same 0/1 coding rules) for conditional effect metrics.
    """

    csv: str
    label: dict
    sensitive: dict
    domain_key: dict
    xs: list[str]
    xns: list[str]
    categorical: dict[str, list] = field(default_factory=dict)
    context: dict[str, dict] = field(default_factory=dict)
    split: tuple = DEFAULT_SPLIT

    def __post_init__(self):
        roles = {self.label["column"], self.sensitive["column"], self.domain_key["column"]}
        overlap = set(self.xs) & set(self.xns)
        if overlap:
            raise ConfigError(f"X_s and X_ns overlap on {sorted(overlap)}")
        clash = (set(self.xs) | set(self.xns)) & roles
        if clash:
            raise ConfigError(f"feature lists include label/sensitive/domain-key columns {sorted(clash)}")
        check_ratio(self.split)

    @classmethod
    def from_json(cls, path) -> DatasetSpec:
        raw = json.loads(Path(path).read_text())
        base = Path(path).parent
        if not Path(raw["csv"]).is_absolute():
            raw["csv"] = str(base / raw["csv"])
        if "split" in raw:
            raw["split"] = tuple(raw["split"])
        return cls(**raw)


def _binarize(series: pd.Series, rule: dict, what: str) -> np.ndarray:
    if "positive" in rule:
        pos = {str(v).strip() for v in rule["positive"]}
        vals = series.astype(str).str.strip()
        if "negative" in rule:
            neg = {str(v).strip() for v in rule["negative"]}
            bad = sorted(set(vals) - pos - neg)
            if bad:
                raise DataError(f"column {series.name!r} ({what}): unmapped values {bad[:5]}")
        return vals.isin(pos).to_numpy().astype(np.int64)
    if "threshold" in rule:
        return (pd.to_numeric(series, errors="raise").to_numpy(float) > float(rule["threshold"])).astype(np.int64)
    raise ConfigError(f"{what} rule for {series.name!r} needs 'positive' or 'threshold'")


def _encode_features(df: pd.DataFrame, cols: list[str], cats: dict) -> tuple[np.ndarray, list[str], list[bool]]:
    blocks, names, binary = [], [], []
    for col in cols:
        if col in cats:
            levels = [str(c).strip() for c in cats[col]]
            vals = df[col].astype(str).str.strip()
            unknown = sorted(set(vals) - set(levels))
            if unknown:
                raise DataError(f"column {col!r}: unmapped categories {unknown[:5]}")
            block = np.stack([(vals == lv).to_numpy(float) for lv in levels], axis=1)
            blocks.append(block)
            names += [f"{col}={lv}" for lv in levels]
            binary += [True] * len(levels)
        else:
            try:
                v = pd.to_numeric(df[col], errors="raise").to_numpy(float)
            except (ValueError, TypeError) as exc:
                raise DataError(f"column {col!r} is not numeric and has no category map ({exc})") from None
            blocks.append(v[:, None])
            names.append(col)
            binary.append(bool(np.isin(v, (0.0, 1.0)).all()))
    if not blocks:
        return np.zeros((len(df), 0)), names, binary
    return np.concatenate(blocks, axis=1), names, binary


def _bin_domains(values: pd.Series, rule: dict) -> np.ndarray:
    n_bins = int(rule.get("bins", 18))
    kind = rule.get("rule", "quantile")
    if n_bins < 1:
        raise ConfigError("domain_key.bins must be positive")
    if kind == "quantile":
        order = pd.to_numeric(values, errors="raise").rank(method="first")
        codes = pd.qcut(order, n_bins, labels=False)
    elif kind == "equal_width":
        codes = pd.cut(pd.to_numeric(values, errors="raise"), n_bins, labels=False)
    else:
        raise ConfigError(f"unknown binning rule {kind!r}")
    codes = np.asarray(codes, dtype=np.int64)
    for b in range(n_bins):
        if not (codes == b).any():
            raise DataError(f"domain-key column {values.name!r}: bin {b + 1} of {n_bins} is empty")
    return codes + 1


def load_tabular(spec: DatasetSpec, normalize: bool = True) -> DomainStore:
    path = Path(spec.csv)
    if not path.exists():
        raise DataError(f"CSV not found: {path}")
    df = pd.read_csv(path, skipinitialspace=True)
    df.columns = [c.strip() for c in df.columns]
    needed = [spec.label["column"], spec.sensitive["column"], spec.domain_key["column"], *spec.xs, *spec.xns,
              *spec.context]
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise DataError(f"CSV {path.name} lacks columns {missing}")
    y = _binarize(df[spec.label["column"]], spec.label, "label")
    a = _binarize(df[spec.sensitive["column"]], spec.sensitive, "sensitive")
    xs, xs_names, xs_bin = _encode_features(df, spec.xs, spec.categorical)
    xns, xns_names, xns_bin = _encode_features(df, spec.xns, spec.categorical)
    ctx = {name: _binarize(df[name], rule, "context") if rule else df[name].to_numpy()
           for name, rule in spec.context.items()}
    t = _bin_domains(df[spec.domain_key["column"]], spec.domain_key)
    domains = []
    for k in range(1, t.max() + 1):
        idx = np.flatnonzero(t == k)
        domains.append(DomainData(k, xs[idx], xns[idx], a[idx], y[idx], {n: v[idx] for n, v in ctx.items()}))
    store = DomainStore(domains, xs_names, xns_names, xs_bin, xns_bin, None,
                        {"generator": "tabular", "spec": _jsonable(asdict(spec))})
    if normalize:
        n_source = split_counts(len(domains), spec.split)[0]
        store = store.normalized(n_source)
    return store


# ---------------------------------------------------------------- splitting


def check_ratio(ratio) -> None:
    if len(ratio) != 3 or any(r < 0 for r in ratio) or not math.isclose(sum(ratio), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split ratio must be three non-negative parts summing to 1, got {ratio}")


def split_counts(n: int, ratio=DEFAULT_SPLIT) -> list[int]:
    """Rounded counts nudged to sum to n, fixing the largest rounding error first."""
    check_ratio(ratio)
    raw = [n * r for r in ratio]
    counts = [int(round(v)) for v in raw]
    while sum(counts) > n:
        i = max(range(3), key=lambda k: counts[k] - raw[k])
        counts[i] -= 1
    while sum(counts) < n:
        i = max(range(3), key=lambda k: raw[k] - counts[k])
        counts[i] += 1
    if min(counts) < 1:
        raise ConfigError(f"split {ratio} of {n} domains leaves an empty part: {counts}")
    return counts


def split_domains(store: DomainStore, ratio=DEFAULT_SPLIT):
    """Contiguous (source, intermediary, target) lists of domains."""
    if len(store) < 3:
        raise ConfigError(f"need at least 3 domains to split, got {len(store)}")
    n_src, n_mid, _ = split_counts(len(store), ratio)
    d = store.domains
    return d[:n_src], d[n_src : n_src + n_mid], d[n_src + n_mid :]


# ---------------------------------------------------------------- correlation


def ppmcc(x, a) -> float:
    x = np.asarray(x, dtype=float).ravel()
    a = np.asarray(a, dtype=float).ravel()
    if len(x) != len(a) or len(x) < 2:
        raise DataError(f"ppmcc needs two equal-length columns of >= 2 values, got {len(x)} and {len(a)}")
    xc, ac = x - x.mean(), a - a.mean()
    sxx, saa = float(xc @ xc), float(ac @ ac)
    if sxx == 0.0 or saa == 0.0:
        raise DataError("correlation undefined: a column has zero variance")
    return float(np.clip((xc @ ac) / math.sqrt(sxx * saa), -1.0, 1.0))


def ppmcc_report(store: DomainStore) -> dict:
    """Mean |PPMCC| with the sensitive attribute per feature group (X_s, X_ns, Y)."""
    xs = np.concatenate([d.x_s for d in store.domains])
    xns = np.concatenate([d.x_ns for d in store.domains])
    a = np.concatenate([d.a for d in store.domains])
    y = np.concatenate([d.y for d in store.domains])

    def group(x, names):
        vals = {}
        for j, n in enumerate(names):
            try:
                vals[n] = ppmcc(x[:, j], a)
            except DataError:
                vals[n] = float("nan")
        finite = [abs(v) for v in vals.values() if np.isfinite(v)]
        return {"per_feature": vals, "mean_abs": float(np.mean(finite)) if finite else float("nan")}

    return {"X_s": group(xs, store.xs_names), "X_ns": group(xns, store.xns_names),
            "Y": {"mean_abs": abs(ppmcc(y, a))}}
