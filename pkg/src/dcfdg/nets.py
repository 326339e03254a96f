"""Network stacks: encoders, decoders, classifier, discriminator and LSTM priors.

Layer recipes follow the fully connected tables used by the model:

* encoder:       in→128 ReLU, 128→128 ReLU, 128→128 ReLU, 128→2·latent (mean ‖ log-var)
* decoder:       in→16 BN LReLU(0.2), 16→64 BN LReLU(0.2), 64→128 BN ReLU, 128→out
* classifier:    d→4d ReLU, 4d→d ReLU, d→d/4 ReLU, d/4→2
* discriminator: in→128 ReLU, 128→256 ReLU, 256→128 ReLU, 128→2
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DimensionError
from .numcore import GaussianDiag, Tensor


@dataclass(frozen=True)
class ModelDims:
    d_xs: int
    d_xns: int
    d_us: int = 8
    d_uns: int = 8
    d_v1: int = 8
    d_v2: int = 8
    h: int = 32
    d_a: int = 2

    def __post_init__(self):
        for name, value in vars(self).items():
            if int(value) <= 0:
                raise ConfigError(f"ModelDims.{name} must be positive, got {value}")


class Module:
    """Minimal container: named parameters plus non-trainable buffers."""

    training = True

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_buffers(f"{prefix}{name}."))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_buffers(f"{prefix}{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def train(self, mode: bool = True):
        self.training = mode
        for value in vars(self).values():
            if isinstance(value, Module):
                value.train(mode)
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int):
        if in_dim <= 0 or out_dim <= 0:
            raise ConfigError(f"Linear dims must be positive, got {in_dim}->{out_dim}")
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = nc.parameter(np.zeros((in_dim, out_dim)))
        self.bias = nc.parameter(np.zeros(out_dim))

    def __call__(self, x: Tensor, detach_params: bool = False) -> Tensor:
        if detach_params:
            return nc.affine(x, self.weight.detach(), self.bias.detach())
        return nc.affine(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5):
        self.dim = dim
        self.momentum, self.eps = momentum, eps
        self.gamma = nc.parameter(np.ones(dim))
        self.beta = nc.parameter(np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def __call__(self, x: Tensor, detach_params: bool = False) -> Tensor:
        gamma, beta = (self.gamma.detach(), self.beta.detach()) if detach_params else (self.gamma, self.beta)
        return nc.batch_norm(x, gamma, beta, self.running_mean, self.running_var,
                             training=self.training, momentum=self.momentum, eps=self.eps)


_ACTIVATIONS = {
    "relu": nc.relu,
    "lrelu": lambda x: nc.leaky_relu(x, 0.2),
    "none": lambda x: x,
}


class MLPStack(Module):
    """Ordered (Linear, optional BatchNorm, activation) blocks."""

    def __init__(self, recipe: list[tuple[int, int, bool, str]], kind: str = "mlp"):
        for (_, out_i, _, _), (in_next, _, _, _) in zip(recipe, recipe[1:]):
            if out_i != in_next:
                raise ConfigError(f"{kind}: layer dims do not chain ({out_i} -> {in_next})")
        self.kind = kind
        self.recipe = [tuple(r) for r in recipe]
        self.linears = [Linear(i, o) for i, o, _, _ in recipe]
        self.norms = [BatchNorm(o) for _, o, bn, _ in recipe if bn]

    @property
    def in_dim(self) -> int:
        return self.recipe[0][0]

    @property
    def out_dim(self) -> int:
        return self.recipe[-1][1]

    def __call__(self, x: Tensor, detach_params: bool = False) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"{self.kind}: shapes {x.shape} and (B, {self.in_dim}) do not conform")
        norms = iter(self.norms)
        for lin, (_, _, bn, act) in zip(self.linears, self.recipe):
            x = lin(x, detach_params)
            if bn:
                x = next(norms)(x, detach_params)
            x = _ACTIVATIONS[act](x)
        return x


class GaussianEncoder(MLPStack):
    """MLP whose 2·latent output splits into (mean, log-variance)."""

    def __init__(self, in_dim: int, latent_dim: int):
        self.latent_dim = latent_dim
        super().__init__(
            [(in_dim, 128, False, "relu"), (128, 128, False, "relu"), (128, 128, False, "relu"),
             (128, 2 * latent_dim, False, "none")],
            kind="encoder",
        )

    def gaussian(self, x: Tensor) -> GaussianDiag:
        out = self(x)
        k = self.latent_dim
        return GaussianDiag(out[:, :k], out[:, k:])


def build_encoder(in_dim: int, latent_dim: int) -> GaussianEncoder:
    if in_dim <= 0 or latent_dim <= 0:
        raise ConfigError(f"encoder dims must be positive, got {in_dim}, {latent_dim}")
    return GaussianEncoder(in_dim, latent_dim)


def build_decoder(latent_in_dim: int, out_dim: int) -> MLPStack:
    if latent_in_dim <= 0 or out_dim <= 0:
        raise ConfigError(f"decoder dims must be positive, got {latent_in_dim}, {out_dim}")
    return MLPStack(
        [(latent_in_dim, 16, True, "lrelu"), (16, 64, True, "lrelu"), (64, 128, True, "relu"),
         (128, out_dim, False, "none")],
        kind="decoder",
    )


def classifier_width(in_dim: int) -> int:
    """Hidden schedule base: the composed input dim rounded up to a multiple of 4."""
    return -(-in_dim // 4) * 4


def build_classifier(in_dim: int) -> MLPStack:
    if in_dim < 4:
        raise ConfigError(f"classifier input dim must be >= 4, got {in_dim}")
    d = classifier_width(in_dim)
    return MLPStack(
        [(in_dim, 4 * d, False, "relu"), (4 * d, d, False, "relu"), (d, d // 4, False, "relu"),
         (d // 4, 2, False, "none")],
        kind="classifier",
    )


def build_discriminator(in_dim: int) -> MLPStack:
    if in_dim <= 0:
        raise ConfigError(f"discriminator input dim must be positive, got {in_dim}")
    return MLPStack(
        [(in_dim, 128, False, "relu"), (128, 256, False, "relu"), (256, 128, False, "relu"),
         (128, 2, False, "none")],
        kind="discriminator",
    )


class LSTMPrior(Module):
    """LSTM cell over the sequence of domain latents with Gaussian heads.

    ``h``, ``c`` and ``prev_latent`` hold the committed recurrent state; the
    prior for the next domain is a single cell step from that state.
    """

    def __init__(self, latent_dim: int, hidden: int):
        self.latent_dim, self.hidden = latent_dim, hidden
        # gate order along the output axis: input, forget, cell, output
        self.cell = Linear(latent_dim + hidden, 4 * hidden)
        self.mean_head = Linear(hidden, latent_dim)
        self.log_var_head = Linear(hidden, latent_dim)
        self.reset_state()

    def reset_state(self) -> None:
        self.h = np.zeros((1, self.hidden))
        self.c = np.zeros((1, self.hidden))
        self.prev_latent = np.zeros((1, self.latent_dim))
        self.steps = np.zeros(1)

    def step(self, prev_latent, h, c) -> tuple[GaussianDiag, Tensor, Tensor]:
        """One cell step; returns (prior, new hidden, new cell) as graph tensors."""
        prev_latent = nc.as_tensor(prev_latent)
        if prev_latent.shape != (1, self.latent_dim):
            raise DimensionError(f"lstm_prior_step: shapes {prev_latent.shape} and (1, {self.latent_dim}) do not conform")
        h, c = nc.as_tensor(h), nc.as_tensor(c)
        gates = self.cell(nc.concat([prev_latent, h], axis=1))
        n = self.hidden
        i = nc.sigmoid(gates[:, :n])
        f = nc.sigmoid(gates[:, n : 2 * n])
        g = nc.tanh(gates[:, 2 * n : 3 * n])
        o = nc.sigmoid(gates[:, 3 * n :])
        c_new = f * c + i * g
        h_new = o * nc.tanh(c_new)
        prior = GaussianDiag(self.mean_head(h_new), self.log_var_head(h_new))
        return prior, h_new, c_new

    def peek(self) -> tuple[GaussianDiag, Tensor]:
        """Prior and hidden state for the current domain, rebuilt from the committed state."""
        prior, h_new, _ = self.step(self.prev_latent, self.h, self.c)
        return prior, h_new

    def advance(self, latent: np.ndarray) -> None:
        """Commit one domain: fold the state forward and remember ``latent`` for the next step."""
        _, h_new, c_new = self.step(self.prev_latent, self.h, self.c)
        self.h[...] = h_new.data
        self.c[...] = c_new.data
        self.prev_latent[...] = np.asarray(latent, dtype=float).reshape(1, self.latent_dim)
        self.steps += 1


def lstm_prior_step(prior: LSTMPrior, prev_latent) -> GaussianDiag:
    """Consume one latent, advance the recurrent state, and return the next prior."""
    prev = np.asarray(nc.as_tensor(prev_latent).data, dtype=float)
    if prev.shape != (1, prior.latent_dim):
        raise DimensionError(f"lstm_prior_step: shapes {prev.shape} and (1, {prior.latent_dim}) do not conform")
    out, h_new, c_new = prior.step(prev, prior.h, prior.c)
    prior.h[...] = h_new.data
    prior.c[...] = c_new.data
    prior.prev_latent[...] = prev
    prior.steps += 1
    return out


def init_module(module: Module, rng: np.random.Generator) -> None:
    """Fan-in uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)); zero biases; BN scale 1, shift 0."""
    for name, p in module.named_parameters().items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "weight":
            bound = 1.0 / np.sqrt(p.shape[0])
            p.data[...] = rng.uniform(-bound, bound, size=p.shape)
        elif leaf == "gamma":
            p.data[...] = 1.0
        else:
            p.data[...] = 0.0
    for name, buf in module.named_buffers().items():
        leaf = name.rsplit(".", 1)[-1]
        buf[...] = 1.0 if leaf == "running_var" else 0.0
    for sub in _walk(module):
        if isinstance(sub, LSTMPrior):
            sub.cell.bias.data[sub.hidden : 2 * sub.hidden] = 1.0


def _walk(module: Module):
    yield module
    for value in vars(module).values():
        if isinstance(value, Module):
            yield from _walk(value)
        elif isinstance(value, list):
            for item in value:
                if isinstance(item, Module):
                    yield from _walk(item)
