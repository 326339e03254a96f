"""The DCFDG model: nine networks wired into the variational, fairness and
total-correlation objectives, plus the discriminator's own objective."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DataError, DimensionError
from .nets import (
    LSTMPrior,
    ModelDims,
    Module,
    build_classifier,
    build_decoder,
    build_discriminator,
    build_encoder,
    init_module,
)
from .numcore import GaussianDiag, Tensor

MODES = ("full", "no_disentangle")
CLIP_EPS = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class HyperParams:
    dims: ModelDims
    lambda_f: float = 0.2
    lambda_tc: float = 1.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mc_samples: int = 1

    def __post_init__(self):
        if self.lambda_f < 0 or self.lambda_tc < 0:
            raise ConfigError(f"loss weights must be non-negative (lambda_f={self.lambda_f}, lambda_tc={self.lambda_tc})")
        if self.mc_samples < 1:
            raise ConfigError(f"mc_samples must be positive, got {self.mc_samples}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> HyperParams:
        d = dict(d)
        d["dims"] = ModelDims(**d["dims"])
        return cls(**d)


@dataclass
class DomainBatch:
    x_s: Tensor
    x_ns: Tensor
    a: Tensor  # one-hot, B×2
    y: np.ndarray  # int labels
    t: int = 1

    def __post_init__(self):
        rows = {self.x_s.shape[0], self.x_ns.shape[0], self.a.shape[0], len(self.y)}
        if len(rows) != 1:
            raise DimensionError(f"DomainBatch: row counts differ {sorted(rows)}")
        if self.t < 1:
            raise DataError(f"domain index must be >= 1, got {self.t}")

    @classmethod
    def from_arrays(cls, x_s, x_ns, a, y, t: int = 1) -> DomainBatch:
        a = np.asarray(a)
        y = np.asarray(y)
        if not np.isin(a, (0, 1)).all() or not np.isin(y, (0, 1)).all():
            raise DataError("sensitive attribute and label must be coded 0/1")
        return cls(nc.Tensor(np.atleast_2d(x_s)), nc.Tensor(np.atleast_2d(x_ns)),
                   nc.Tensor(one_hot(a)), y.astype(np.int64), t)

    @property
    def size(self) -> int:
        return len(self.y)

    @property
    def a_int(self) -> np.ndarray:
        return self.a.data[:, 1].astype(np.int64)


def one_hot(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64).reshape(-1)
    out = np.zeros((len(a), 2))
    out[np.arange(len(a)), a] = 1.0
    return out


@dataclass
class LatentBundle:
    q_us: GaussianDiag
    q_uns: GaussianDiag | None
    q_v1: GaussianDiag
    q_v2: GaussianDiag | None
    u_s: Tensor
    u_ns: Tensor | None
    u_v1: Tensor
    u_v2: Tensor | None
    p_v1: GaussianDiag
    p_v2: GaussianDiag | None
    t: int = 1


@dataclass
class LossBreakdown:
    recon_s: float
    recon_ns: float
    cls: float
    kl_s: float
    kl_ns: float
    kl_v1: float
    kl_v2: float
    fair: float
    tc: float
    total_model: float
    disc_objective: float
    model_tensor: Tensor | None = field(default=None, repr=False, compare=False)
    disc_tensor: Tensor | None = field(default=None, repr=False, compare=False)

    COLUMNS = ("recon_s", "recon_ns", "cls", "kl_s", "kl_ns", "kl_v1", "kl_v2", "fair", "tc",
               "total_model", "disc_objective")

    def as_row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.COLUMNS}

    @property
    def neg_elbo(self) -> float:
        return self.recon_s + self.recon_ns + self.cls + self.kl_s + self.kl_ns + self.kl_v1 + self.kl_v2


class DCFDGModel(Module):
    """The parameter set θ.

    In ``no_disentangle`` mode the slots ``E_s``/``E_v1``/``F_v1``/``D_s`` hold
    the single joint encoder, dynamic encoder, prior and decoder; the
    non-sensitive slots stay empty.
    """

    def __init__(self, dims: ModelDims, mode: str = "full",
                 xs_binary: tuple[bool, ...] | None = None, xns_binary: tuple[bool, ...] | None = None):
        if mode not in MODES:
            raise ConfigError(f"unknown model mode {mode!r}; expected one of {MODES}")
        self.dims, self.mode = dims, mode
        self.xs_binary = tuple(bool(b) for b in (xs_binary or (False,) * dims.d_xs))
        self.xns_binary = tuple(bool(b) for b in (xns_binary or (False,) * dims.d_xns))
        if len(self.xs_binary) != dims.d_xs or len(self.xns_binary) != dims.d_xns:
            raise ConfigError("binary feature masks must match d_xs / d_xns")
        d = dims
        if mode == "full":
            self.E_s = build_encoder(d.d_xs + d.d_a, d.d_us)
            self.E_ns = build_encoder(d.d_xns, d.d_uns)
            self.E_v1 = build_encoder(d.d_xs + d.h, d.d_v1)
            self.E_v2 = build_encoder(d.d_xns + d.h, d.d_v2)
            self.F_v1 = LSTMPrior(d.d_v1, d.h)
            self.F_v2 = LSTMPrior(d.d_v2, d.h)
            self.D_s = build_decoder(d.d_us + d.d_v1 + d.d_a, d.d_xs)
            self.D_ns = build_decoder(d.d_uns + d.d_v2, d.d_xns)
            self.C = build_classifier(d.d_us + d.d_uns + d.d_a)
        else:
            du, dv, dx = d.d_us + d.d_uns, d.d_v1 + d.d_v2, d.d_xs + d.d_xns
            self.E_s = build_encoder(dx + d.d_a, du)
            self.E_ns = None
            self.E_v1 = build_encoder(dx + d.h, dv)
            self.E_v2 = None
            self.F_v1 = LSTMPrior(dv, d.h)
            self.F_v2 = None
            self.D_s = build_decoder(du + dv + d.d_a, dx)
            self.D_ns = None
            self.C = build_classifier(du + d.d_a)

    @property
    def priors(self) -> list[LSTMPrior]:
        return [p for p in (self.F_v1, self.F_v2) if p is not None]


class Discriminator(Module):
    """The parameter set ψ; input is concat(u_s, a, u_ns)."""

    def __init__(self, dims: ModelDims):
        self.in_dim = dims.d_us + dims.d_a + dims.d_uns
        self.D = build_discriminator(self.in_dim)

    def prob_joint(self, z: Tensor, detach_params: bool = False) -> Tensor:
        """Clipped softmax component 0: the probability that z came from the joint."""
        probs = nc.softmax(self.D(z, detach_params=detach_params))
        return nc.clip(probs[:, 0], CLIP_EPS, 1.0 - CLIP_EPS)


def init_params(model: DCFDGModel, disc: Discriminator | None, seed: int) -> None:
    rng = np.random.default_rng(seed)
    init_module(model, rng)
    if disc is not None:
        init_module(disc, rng)


def build_model(hyper: HyperParams, mode: str = "full", seed: int = 0,
                xs_binary=None, xns_binary=None) -> tuple[DCFDGModel, Discriminator]:
    model = DCFDGModel(hyper.dims, mode, xs_binary, xns_binary)
    disc = Discriminator(hyper.dims)
    init_params(model, disc, seed)
    return model, disc


# ---------------------------------------------------------------- inference


def _pooled(x: Tensor, h: Tensor) -> Tensor:
    return nc.concat([nc.mean(x, axis=0, keepdims=True), h], axis=1)


def infer(model: DCFDGModel, batch: DomainBatch, rng: np.random.Generator | None = None,
          noise: dict[str, np.ndarray] | None = None) -> LatentBundle:
    """Posteriors, samples and current-domain priors for one batch.

    Noise comes from ``noise`` (keyed us/uns/v1/v2) when given, otherwise from
    ``rng`` in that fixed order; with neither, samples are the posterior means.
    """

    def sample(key: str, q: GaussianDiag) -> Tensor:
        if noise is not None:
            return nc.reparameterize(q, noise[key])
        if rng is not None:
            return nc.reparameterize(q, rng.standard_normal(q.shape))
        return q.mean

    if model.mode == "full":
        if batch.x_s.shape[1] != model.dims.d_xs or batch.x_ns.shape[1] != model.dims.d_xns:
            raise DimensionError(f"infer: shapes {batch.x_s.shape}/{batch.x_ns.shape} and "
                                 f"(B, {model.dims.d_xs})/(B, {model.dims.d_xns}) do not conform")
        q_us = model.E_s.gaussian(nc.concat([batch.x_s, batch.a], axis=1))
        q_uns = model.E_ns.gaussian(batch.x_ns)
        p_v1, h_v1 = model.F_v1.peek()
        p_v2, h_v2 = model.F_v2.peek()
        q_v1 = model.E_v1.gaussian(_pooled(batch.x_s, h_v1))
        q_v2 = model.E_v2.gaussian(_pooled(batch.x_ns, h_v2))
        u_s, u_ns = sample("us", q_us), sample("uns", q_uns)
        u_v1, u_v2 = sample("v1", q_v1), sample("v2", q_v2)
        return LatentBundle(q_us, q_uns, q_v1, q_v2, u_s, u_ns, u_v1, u_v2, p_v1, p_v2, batch.t)
    x = nc.concat([batch.x_s, batch.x_ns], axis=1)
    q_u = model.E_s.gaussian(nc.concat([x, batch.a], axis=1))
    p_v, h_v = model.F_v1.peek()
    q_v = model.E_v1.gaussian(_pooled(x, h_v))
    u, u_v = sample("us", q_u), sample("v1", q_v)
    return LatentBundle(q_u, None, q_v, None, u, None, u_v, None, p_v, None, batch.t)


# ---------------------------------------------------------------- loss terms


def _recon_nll(out: Tensor, x: Tensor, binary: tuple[bool, ...]) -> Tensor:
    """Per-batch mean of the summed per-feature negative log-likelihood."""
    mask = np.asarray(binary, dtype=bool)
    cont = np.flatnonzero(~mask)
    bina = np.flatnonzero(mask)
    parts = []
    if len(cont):
        diff = nc.sub(out[:, cont], x[:, cont])
        parts.append(nc.add(nc.mul(nc.sum(nc.square(diff), axis=1), 0.5), 0.5 * len(cont) * LOG_2PI))
    if len(bina):
        logits = out[:, bina]
        parts.append(nc.sum(nc.sub(nc.softplus(logits), nc.mul(x[:, bina], logits)), axis=1))
    per_row = parts[0] if len(parts) == 1 else nc.add(parts[0], parts[1])
    return nc.mean(per_row)


def _standard_kl(q: GaussianDiag) -> Tensor:
    return nc.gaussian_kl(q, GaussianDiag.standard(q.shape))


def elbo_s(model: DCFDGModel, batch: DomainBatch, bundle: LatentBundle) -> tuple[Tensor, Tensor, Tensor]:
    """(reconstruction NLL of x_s, KL(q_us || N(0,I)), KL(q_v1 || p_v1))."""
    B = batch.size
    if model.mode == "full":
        z = nc.concat([bundle.u_s, nc.broadcast_rows(bundle.u_v1, B), batch.a], axis=1)
        recon = _recon_nll(model.D_s(z), batch.x_s, model.xs_binary)
    else:
        z = nc.concat([bundle.u_s, nc.broadcast_rows(bundle.u_v1, B), batch.a], axis=1)
        x = nc.concat([batch.x_s, batch.x_ns], axis=1)
        recon = _recon_nll(model.D_s(z), x, model.xs_binary + model.xns_binary)
    return recon, _standard_kl(bundle.q_us), nc.gaussian_kl(bundle.q_v1, bundle.p_v1)


def elbo_ns(model: DCFDGModel, batch: DomainBatch, bundle: LatentBundle) -> tuple[Tensor, Tensor, Tensor]:
    """(reconstruction NLL of x_ns, KL(q_uns || N(0,I)), KL(q_v2 || p_v2))."""
    if model.mode != "full":
        zero = nc.Tensor(0.0)
        return zero, zero, zero
    z = nc.concat([bundle.u_ns, nc.broadcast_rows(bundle.u_v2, batch.size)], axis=1)
    recon = _recon_nll(model.D_ns(z), batch.x_ns, model.xns_binary)
    return recon, _standard_kl(bundle.q_uns), nc.gaussian_kl(bundle.q_v2, bundle.p_v2)


def classifier_input(model: DCFDGModel, u_s: Tensor, u_ns: Tensor | None, a) -> Tensor:
    parts = [u_s] if u_ns is None or model.mode != "full" else [u_s, u_ns]
    return nc.concat(parts + [nc.as_tensor(a)], axis=1)


def classification_loss(model: DCFDGModel, batch: DomainBatch, bundle: LatentBundle) -> Tensor:
    logits = model.C(classifier_input(model, bundle.u_s, bundle.u_ns, batch.a))
    logp = nc.log_softmax(logits)
    picked = logp[np.arange(batch.size), batch.y]
    return nc.neg(nc.mean(picked))


def fairness_loss(model: DCFDGModel, batch: DomainBatch, bundle: LatentBundle) -> Tensor:
    """Mean L2 gap between class probabilities under the factual and flipped attribute."""
    flipped = nc.Tensor(1.0 - batch.a.data)
    p_fact = nc.softmax(model.C(classifier_input(model, bundle.u_s, bundle.u_ns, batch.a)))
    p_flip = nc.softmax(model.C(classifier_input(model, bundle.u_s, bundle.u_ns, flipped)))
    return nc.mean(nc.row_norm(nc.sub(p_fact, p_flip)))


def tc_loss(disc: Discriminator, bundle: LatentBundle, a: Tensor) -> Tensor:
    """Density-ratio estimate of the total correlation between u_s and (a, u_ns).

    Discriminator weights enter detached: only the encoders receive gradient.
    """
    z = nc.concat([bundle.u_s, nc.as_tensor(a), bundle.u_ns], axis=1)
    d = disc.prob_joint(z, detach_params=True)
    return nc.mean(nc.sub(nc.log(d), nc.log(nc.sub(1.0, d))))


def discriminator_objective(disc: Discriminator, bundle: LatentBundle, a: Tensor, perm_seed) -> Tensor:
    """E[log D(joint)] + E[log(1 - D(permuted))] on latents detached from θ."""
    u_s, u_ns = bundle.u_s.detach(), bundle.u_ns.detach()
    a = nc.as_tensor(a).detach()
    B = u_s.shape[0]
    if B < 2:
        warnings.warn("discriminator_objective: batch of one row, permutation is the identity", RuntimeWarning)
    perm = np.random.default_rng(perm_seed).permutation(B)
    joint = nc.concat([u_s, a, u_ns], axis=1)
    shuffled = nc.concat([nc.Tensor(u_s.data[perm]), a, u_ns], axis=1)
    d_joint = disc.prob_joint(joint)
    d_perm = disc.prob_joint(shuffled)
    return nc.add(nc.mean(nc.log(d_joint)), nc.mean(nc.log(nc.sub(1.0, d_perm))))


def total_loss(model: DCFDGModel, disc: Discriminator, batch: DomainBatch, hyper: HyperParams,
               seed, noise: dict[str, np.ndarray] | None = None) -> LossBreakdown:
    """Every loss component for one batch.

    ``seed`` drives both the reparameterization noise and the discriminator
    permutation; it may be an int or a sequence of ints.
    """
    seed = list(np.atleast_1d(seed).astype(np.int64))
    rng = np.random.default_rng(seed + [0])
    bundle = infer(model, batch, rng=rng, noise=noise)
    recon_s, kl_s, kl_v1 = elbo_s(model, batch, bundle)
    recon_ns, kl_ns, kl_v2 = elbo_ns(model, batch, bundle)
    cls = classification_loss(model, batch, bundle)
    neg_elbo = nc.add(nc.add(nc.add(recon_s, recon_ns), cls), nc.add(nc.add(kl_s, kl_ns), nc.add(kl_v1, kl_v2)))
    if model.mode == "full":
        fair = fairness_loss(model, batch, bundle)
        tc = tc_loss(disc, bundle, batch.a)
        total = nc.add(neg_elbo, nc.add(nc.mul(fair, hyper.lambda_f), nc.mul(tc, hyper.lambda_tc)))
        disc_obj = discriminator_objective(disc, bundle, batch.a, seed + [1])
    else:
        fair = tc = disc_obj = nc.Tensor(0.0)
        total = neg_elbo
    return LossBreakdown(
        recon_s=recon_s.item(), recon_ns=recon_ns.item(), cls=cls.item(),
        kl_s=kl_s.item(), kl_ns=kl_ns.item(), kl_v1=kl_v1.item(), kl_v2=kl_v2.item(),
        fair=fair.item(), tc=tc.item(), total_model=total.item(), disc_objective=disc_obj.item(),
        model_tensor=total, disc_tensor=disc_obj,
    )


# ---------------------------------------------------------------- prediction


def counterfactual_predict(model: DCFDGModel, batch: DomainBatch, intervene_a: int) -> np.ndarray:
    """Class probabilities under do(A = intervene_a) with the exogenous latents
    held at their posterior means from the factual inputs.  Returns B×2."""
    if intervene_a not in (0, 1):
        raise ConfigError(f"intervene_a must be 0 or 1, got {intervene_a}")
    with nc.no_grad():
        if model.mode == "full":
            u_s = model.E_s.gaussian(nc.concat([batch.x_s, batch.a], axis=1)).mean
            u_ns = model.E_ns.gaussian(batch.x_ns).mean
        else:
            x = nc.concat([batch.x_s, batch.x_ns, batch.a], axis=1)
            u_s, u_ns = model.E_s.gaussian(x).mean, None
        a = one_hot(np.full(batch.size, intervene_a))
        return nc.softmax(model.C(classifier_input(model, u_s, u_ns, a))).data


def predict(model: DCFDGModel, batch: DomainBatch) -> np.ndarray:
    """Factual prediction: the counterfactual path with every row's own attribute."""
    with nc.no_grad():
        if model.mode == "full":
            u_s = model.E_s.gaussian(nc.concat([batch.x_s, batch.a], axis=1)).mean
            u_ns = model.E_ns.gaussian(batch.x_ns).mean
        else:
            u_s = model.E_s.gaussian(nc.concat([batch.x_s, batch.x_ns, batch.a], axis=1)).mean
            u_ns = None
        return nc.softmax(model.C(classifier_input(model, u_s, u_ns, batch.a))).data
