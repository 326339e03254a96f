"""Sequential-domain two-player training loop, ablation wiring and checkpoints."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numcore as nc
from .data import DomainData
from .errors import CheckpointError, ConfigError, NumericError
from .model import (
    DCFDGModel,
    Discriminator,
    DomainBatch,
    HyperParams,
    LossBreakdown,
    build_model,
    infer,
    total_loss,
)
from .nets import ModelDims

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_disentangle", "no_fairness")
LOG_COLUMNS = ("t", "epoch", "step") + LossBreakdown.COLUMNS


@dataclass
class TrainConfig:
    hyper: HyperParams
    epochs_per_domain: int = 50
    batch_size: int = 128
    seed: int = 0
    ablation_mode: str = "full"
    checkpoint_path: str | None = None
    snapshot_every: int = 10
    lambda_f_grid: list[float] | None = None

    def __post_init__(self):
        if self.epochs_per_domain < 0:
            raise ConfigError(f"epochs_per_domain must be >= 0, got {self.epochs_per_domain}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.ablation_mode not in ABLATIONS:
            raise ConfigError(f"unknown ablation mode {self.ablation_mode!r}; expected one of {ABLATIONS}")
        if self.snapshot_every < 0:
            raise ConfigError("snapshot_every must be >= 0")


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    domain_seconds: dict[int, float] = field(default_factory=dict)

    def append(self, t: int, epoch: int, step: int, lb: LossBreakdown) -> None:
        key = (t, epoch, step)
        if self.records and key <= tuple(self.records[-1][k] for k in ("t", "epoch", "step")):
            raise ConfigError(f"log records out of order at {key}")
        self.records.append({"t": t, "epoch": epoch, "step": step, **lb.as_row()})

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.records:
            w.writerow([r["t"], r["epoch"], r["step"]] + [repr(float(r[c])) for c in LossBreakdown.COLUMNS])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def epoch_means(self, column: str = "total_model") -> list[tuple[int, int, float]]:
        groups: dict[tuple[int, int], list[float]] = {}
        for r in self.records:
            groups.setdefault((r["t"], r["epoch"]), []).append(r[column])
        return [(t, e, float(np.mean(v))) for (t, e), v in groups.items()]


@dataclass
class TrainResult:
    model: DCFDGModel
    disc: Discriminator
    log: TrainLog
    snapshots: list[tuple[str, dict]] = field(default_factory=list)

    def __iter__(self):
        return iter((self.model, self.disc, self.log))


def apply_ablation(mode: str, hyper: HyperParams) -> tuple[str, HyperParams]:
    """Model wiring and effective hyperparameters for an ablation mode."""
    if mode == "full":
        return "full", hyper
    if mode == "no_fairness":
        return "full", replace(hyper, lambda_f=0.0)
    if mode == "no_disentangle":
        return "no_disentangle", hyper
    raise ConfigError(f"unknown ablation mode {mode!r}; expected one of {ABLATIONS}")


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled near-equal chunks of at most ``batch_size`` rows (each >= 2 when n >= 2)."""
    order = rng.permutation(n)
    return np.array_split(order, max(1, -(-n // batch_size)))


def to_batch(d: DomainData, idx=None) -> DomainBatch:
    if idx is not None:
        d = d.rows(idx)
    return DomainBatch.from_arrays(d.x_s, d.x_ns, d.a, d.y, d.t)


def _domain_latents(model: DCFDGModel, batch: DomainBatch) -> list[np.ndarray]:
    with nc.no_grad():
        bundle = infer(model, batch)
    if model.mode == "full":
        return [bundle.q_v1.mean.data, bundle.q_v2.mean.data]
    return [bundle.q_v1.mean.data]


def train_dcfdg(domains: list[DomainData], cfg: TrainConfig, xs_binary=None, xns_binary=None) -> TrainResult:
    """Train on source domains in order t = 1..T.

    Per domain the LSTM priors are positioned once; each batch takes an Adam
    step on θ for the model objective and then an ascent step on ψ for the
    discriminator objective.  The domain's latent fed to the priors is the
    posterior mean from the last batch seen.
    """
    if not domains:
        raise ConfigError("no training domains")
    for d in domains:
        if len(d) == 0:
            raise ConfigError(f"training domain {d.t} is empty")
    mode, hyper = apply_ablation(cfg.ablation_mode, cfg.hyper)
    model, disc = build_model(hyper, mode, cfg.seed, xs_binary, xns_binary)
    opt_theta = nc.Adam(model.parameters(), lr=hyper.lr, betas=(hyper.beta1, hyper.beta2), eps=hyper.eps)
    opt_psi = nc.Adam(disc.parameters(), lr=hyper.lr, betas=(hyper.beta1, hyper.beta2), eps=hyper.eps)
    shuffle_rng = np.random.default_rng([cfg.seed, 7])
    tlog = TrainLog()
    snapshots: list[tuple[str, dict]] = []
    model.train()
    for k, dom in enumerate(domains):
        t = k + 1
        started = time.perf_counter()
        last_batch = None
        for epoch in range(cfg.epochs_per_domain):
            for step, idx in enumerate(batches(len(dom), cfg.batch_size, shuffle_rng)):
                batch = to_batch(dom, idx)
                batch.t = t
                lb = total_loss(model, disc, batch, hyper, seed=[cfg.seed, t, epoch, step])
                tlog.append(t, epoch, step, lb)
                if not (np.isfinite(lb.total_model) and np.isfinite(lb.disc_objective)):
                    raise NumericError(f"non-finite loss at t={t} epoch={epoch} step={step}: {lb.as_row()}")
                opt_theta.zero_grad()
                nc.backward(lb.model_tensor)
                opt_theta.step()
                if model.mode == "full":
                    opt_psi.zero_grad()
                    nc.backward(nc.neg(lb.disc_tensor))
                    opt_psi.step()
                last_batch = batch
            if (cfg.snapshot_every and k == len(domains) - 1 and (epoch + 1) % cfg.snapshot_every == 0
                    and epoch + 1 < cfg.epochs_per_domain):
                snapshots.append((f"t{t}_e{epoch + 1}", state_arrays(model, disc)))
        if last_batch is None:
            last_batch = to_batch(dom)
            last_batch.t = t
        for prior, latent in zip(model.priors, _domain_latents(model, last_batch)):
            prior.advance(latent)
        tlog.domain_seconds[t] = time.perf_counter() - started
        log.info("domain %d/%d done in %.1fs", t, len(domains), tlog.domain_seconds[t])
    model.eval()
    snapshots.append(("final", state_arrays(model, disc)))
    result = TrainResult(model, disc, tlog, snapshots)
    if cfg.checkpoint_path:
        save_checkpoint(cfg.checkpoint_path, model, disc, hyper)
    return result


# ---------------------------------------------------------------- checkpoints


def state_arrays(model: DCFDGModel, disc: Discriminator) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.named_parameters().items():
        out[f"theta/{name}"] = p.data.copy()
    for name, b in model.named_buffers().items():
        out[f"theta_buf/{name}"] = b.copy()
    for name, p in disc.named_parameters().items():
        out[f"psi/{name}"] = p.data.copy()
    for name, b in disc.named_buffers().items():
        out[f"psi_buf/{name}"] = b.copy()
    return out


def load_state_arrays(model: DCFDGModel, disc: Discriminator, arrays: dict[str, np.ndarray]) -> None:
    targets = {}
    targets.update({f"theta/{k}": v.data for k, v in model.named_parameters().items()})
    targets.update({f"theta_buf/{k}": v for k, v in model.named_buffers().items()})
    targets.update({f"psi/{k}": v.data for k, v in disc.named_parameters().items()})
    targets.update({f"psi_buf/{k}": v for k, v in disc.named_buffers().items()})
    if set(targets) != set(arrays):
        missing = sorted(set(targets) - set(arrays))[:5]
        extra = sorted(set(arrays) - set(targets))[:5]
        raise CheckpointError(f"checkpoint arrays do not match the model (missing {missing}, unexpected {extra})")
    for name, dst in targets.items():
        src = arrays[name]
        if src.shape != dst.shape:
            raise CheckpointError(f"array {name!r}: shape {src.shape} != {dst.shape}")
        dst[...] = src


def checkpoint_meta(model: DCFDGModel, hyper: HyperParams) -> dict:
    return {"hyper": hyper.to_dict(), "mode": model.mode,
            "xs_binary": list(model.xs_binary), "xns_binary": list(model.xns_binary)}


def save_checkpoint(path, model: DCFDGModel, disc: Discriminator, hyper: HyperParams,
                    extra: dict | None = None) -> None:
    meta = checkpoint_meta(model, hyper)
    if extra:
        meta["extra"] = extra
    nc.save_container(path, state_arrays(model, disc), meta)


def load_checkpoint(path) -> tuple[DCFDGModel, Discriminator, HyperParams, dict]:
    arrays, meta = nc.load_container(path)
    try:
        hyper = HyperParams.from_dict(meta["hyper"])
        model = DCFDGModel(hyper.dims, meta["mode"], tuple(meta["xs_binary"]), tuple(meta["xns_binary"]))
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    disc = Discriminator(hyper.dims)
    load_state_arrays(model, disc, arrays)
    model.eval()
    return model, disc, hyper, meta.get("extra", {})


def restore(model: DCFDGModel, disc: Discriminator, arrays: dict) -> tuple[DCFDGModel, Discriminator]:
    """Fresh copies of ``model``/``disc`` holding ``arrays``."""
    m = DCFDGModel(model.dims, model.mode, model.xs_binary, model.xns_binary)
    d = Discriminator(model.dims)
    load_state_arrays(m, d, arrays)
    m.eval()
    return m, d


def dims_for(store_xs: int, store_xns: int, latent: int = 8, hidden: int = 32) -> ModelDims:
    return ModelDims(d_xs=store_xs, d_xns=store_xns, d_us=latent, d_uns=latent, d_v1=latent, d_v2=latent, h=hidden)
