"""Variational recurrent classifier: prior, encoder, latent draw, classifier, GRU, decoder."""

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, NumericError, ParseError
from .tensor import Tensor

LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0


@dataclass(frozen=True)
class VrnnConfig:
    input_dim: int
    hidden_dim: int = 32
    latent_dim: int = 8
    mlp_dim: int = 32
    clf_layers: tuple = (16,)
    n_classes: int = 1
    seed: int = 0
    init: str = "uniform"

    def __post_init__(self):
        object.__setattr__(self, "clf_layers", tuple(int(n) for n in self.clf_layers))
        dims = [self.input_dim, self.hidden_dim, self.latent_dim, self.mlp_dim, self.n_classes]
        if min(dims) < 1 or any(n < 1 for n in self.clf_layers):
            raise ConfigurationError(f"all dimensions must be >= 1, got {self}")
        if self.init not in ("uniform", "zeros"):
            raise ConfigurationError(f"unknown init scheme {self.init!r}")

    def to_dict(self):
        d = asdict(self)
        d["clf_layers"] = list(self.clf_layers)
        return d


@dataclass
class GaussianParams:
    mu: Tensor
    log_var: Tensor

    @property
    def var(self):
        return np.exp(self.log_var.data)

    @property
    def std(self):
        return np.exp(0.5 * self.log_var.data)


@dataclass
class LatentSample:
    epsilon: np.ndarray
    z: Tensor


@dataclass
class ForwardTrace:
    posterior: list = field(default_factory=list)
    prior: list = field(default_factory=list)
    samples: list = field(default_factory=list)
    h: list = field(default_factory=list)
    logit: list = field(default_factory=list)
    y_hat: list = field(default_factory=list)
    x_hat: list = field(default_factory=list)

    def __len__(self):
        return len(self.h)


class Linear:
    def __init__(self, n_in, n_out, rng, init="uniform"):
        if init == "zeros":
            w = np.zeros((n_in, n_out))
            b = np.zeros(n_out)
        else:
            bound = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
            b = rng.uniform(-bound, bound, size=n_out)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x):
        return x @ self.weight + self.bias

    def parameters(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class MLP:
    """Affine layers with tanh between them; the last layer is affine."""

    def __init__(self, sizes, rng, init="uniform"):
        self.layers = [Linear(a, b, rng, init) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = T.tanh(layer(x))
        return self.layers[-1](x)

    def hidden(self, x):
        """Activation feeding the final affine layer."""
        for layer in self.layers[:-1]:
            x = T.tanh(layer(x))
        return x

    def parameters(self, prefix):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"{prefix}.{i}"))
        return out


class GRUCell:
    def __init__(self, n_in, n_hidden, rng, init="uniform"):
        self.n_hidden = n_hidden
        self.input_map = Linear(n_in, 3 * n_hidden, rng, init)
        self.hidden_map = Linear(n_hidden, 3 * n_hidden, rng, init)

    def __call__(self, u, h):
        n = self.n_hidden
        gi = self.input_map(u)
        gh = self.hidden_map(h)
        reset = T.sigmoid(gi[..., :n] + gh[..., :n])
        update = T.sigmoid(gi[..., n:2 * n] + gh[..., n:2 * n])
        cand = T.tanh(gi[..., 2 * n:] + reset * gh[..., 2 * n:])
        return cand + update * (h - cand)

    def parameters(self, prefix):
        out = self.input_map.parameters(f"{prefix}.input")
        out.update(self.hidden_map.parameters(f"{prefix}.hidden"))
        return out


def _gaussian(out, z_dim):
    return GaussianParams(out[..., :z_dim], T.clip(out[..., z_dim:], LOG_VAR_MIN, LOG_VAR_MAX))


class VRNN:
    def __init__(self, config: VrnnConfig):
        self.config = config
        c = config
        rng = np.random.default_rng(c.seed)
        self.prior = MLP([c.hidden_dim, c.mlp_dim, 2 * c.latent_dim], rng, c.init)
        self.encoder = MLP([c.hidden_dim + c.input_dim, c.mlp_dim, 2 * c.latent_dim], rng, c.init)
        self.classifier = MLP([c.latent_dim, *c.clf_layers, c.n_classes], rng, c.init)
        self.gru = GRUCell(c.input_dim + c.latent_dim, c.hidden_dim, rng, c.init)
        self.decoder = MLP([c.hidden_dim + c.latent_dim, c.mlp_dim, c.input_dim], rng, c.init)

    def parameters(self):
        params = {}
        params.update(self.prior.parameters("prior"))
        params.update(self.encoder.parameters("encoder"))
        params.update(self.classifier.parameters("classifier"))
        params.update(self.gru.parameters("gru"))
        params.update(self.decoder.parameters("decoder"))
        return params

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state):
        params = self.parameters()
        if set(state) != set(params):
            raise ConfigurationError("parameter names do not match the model layout")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigurationError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    @property
    def is_affine_head(self):
        return len(self.config.clf_layers) == 0

    def head_weight(self):
        """Weights of the classifier's final affine layer, shape (last hidden, n_classes)."""
        return self.classifier.layers[-1].weight

    # -- single-step components --------------------------------------------

    def prior_net(self, h_prev):
        return _gaussian(self.prior(h_prev), self.config.latent_dim)

    def encode(self, h_prev, x_t):
        return _gaussian(self.encoder(T.concat([h_prev, x_t], axis=-1)), self.config.latent_dim)

    @staticmethod
    def reparameterize(params, rng=None, epsilon=None):
        if epsilon is None:
            epsilon = rng.standard_normal(params.mu.shape)
        epsilon = np.asarray(epsilon, dtype=np.float64)
        z = params.mu + T.exp(0.5 * params.log_var) * epsilon
        return LatentSample(epsilon, z)

    def classify(self, z):
        logit = self.classifier(z)
        if self.config.n_classes == 1:
            logit = logit[..., 0]
            return logit, T.sigmoid(logit)
        return logit, T.softmax(logit, axis=-1)

    def recur(self, h_prev, x_t, z_t):
        return self.gru(T.concat([x_t, z_t], axis=-1), h_prev)

    def decode(self, h_t, z_t):
        return self.decoder(T.concat([h_t, z_t], axis=-1))

    def initial_state(self, batch_shape=()):
        return Tensor(np.zeros((*batch_shape, self.config.hidden_dim)))

    # -- sequences -----------------------------------------------------------

    def forward_sequence(self, x, mode="mean", rng=None, h0=None, steps=None):
        """Unroll over ``x`` of shape (T, d) or (B, T, d).

        ``mode='mean'`` sets z_t = mu_t; ``mode='sample'`` draws z_t with ``rng``.
        ``steps`` truncates the unroll.
        """
        if mode not in ("mean", "sample"):
            raise ConfigurationError(f"unknown mode {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (2, 3) or x.shape[-1] != self.config.input_dim:
            raise ConfigurationError(f"expected (..., T, {self.config.input_dim}) input, got {x.shape}")
        n_steps = x.shape[-2] if steps is None else min(steps, x.shape[-2])
        if n_steps < 1:
            raise ConfigurationError("sequence length must be >= 1")
        if mode == "sample" and rng is None:
            raise ConfigurationError("sample mode needs an rng")
        h = self.initial_state(x.shape[:-2]) if h0 is None else T.as_tensor(h0)
        trace = ForwardTrace()
        for t in range(n_steps):
            try:
                h = self._step(x[..., t, :], h, mode, rng, trace)
            except NumericError as exc:
                raise NumericError(f"timestep {t}: {exc}") from exc
        return trace

    def _step(self, x_t, h_prev, mode, rng, trace):
        x_t = Tensor(x_t)
        prior = self.prior_net(h_prev)
        post = self.encode(h_prev, x_t)
        if mode == "mean":
            sample = LatentSample(np.zeros(post.mu.shape), post.mu)
        else:
            sample = self.reparameterize(post, rng)
        logit, y_hat = self.classify(sample.z)
        h = self.recur(h_prev, x_t, sample.z)
        x_hat = self.decode(h, sample.z)
        trace.posterior.append(post)
        trace.prior.append(prior)
        trace.samples.append(sample)
        trace.h.append(h)
        trace.logit.append(logit)
        trace.y_hat.append(y_hat)
        trace.x_hat.append(x_hat)
        return h

    def run_state(self, x, h0=None):
        """Mean-mode hidden state after consuming all of ``x`` (no graph)."""
        with T.no_grad():
            trace = self.forward_sequence(x, mode="mean", h0=h0)
        return trace.h[-1].data

    def final_posterior(self, x, h0=None):
        """Mean-mode posterior at the last step of ``x`` (no graph).

        Skips the prior, classifier and decoder, which the last posterior does
        not depend on.
        """
        x = np.asarray(x, dtype=np.float64)
        h = self.initial_state(x.shape[:-2]) if h0 is None else T.as_tensor(np.broadcast_to(
            h0, (*x.shape[:-2], self.config.hidden_dim)))
        with T.no_grad():
            for t in range(x.shape[-2]):
                x_t = Tensor(x[..., t, :])
                post = self.encode(h, x_t)
                if t + 1 < x.shape[-2]:
                    h = self.recur(h, x_t, post.mu)
        return GaussianParams(post.mu.detach(), post.log_var.detach())

    def predict_proba(self, x, h0=None):
        """Mean-mode probabilities at every step, shape (..., T) or (..., T, C)."""
        with T.no_grad():
            trace = self.forward_sequence(x, mode="mean", h0=h0)
        return np.stack([y.data for y in trace.y_hat], axis=-1 if self.config.n_classes == 1 else -2)


# -- checkpoint file ---------------------------------------------------------
#
# offset  size  field
# 0       8     magic b"VRNNCKPT"
# 8       4     format version, uint32 little-endian
# 12      4     header length N, uint32 little-endian
# 16      N     UTF-8 JSON header: {"config": ..., "seed": int,
#               "params": [[name, shape], ...], "meta": {...}}
# 16+N    ...   parameter arrays in header order, each C-order float64 '<f8'

CHECKPOINT_MAGIC = b"VRNNCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(model, path, meta: Optional[dict] = None):
    state = model.state_dict()
    header = {
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "params": [[name, list(arr.shape)] for name, arr in state.items()],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return (model, meta) from a checkpoint file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a checkpoint file")
    if len(raw) < 16:
        raise ParseError(f"{path}: truncated checkpoint header")
    version, n = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: unreadable checkpoint header ({exc})") from None
    model = VRNN(VrnnConfig(**header["config"]))
    offset = 16 + n
    state = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        if offset + 8 * count > len(raw):
            raise ParseError(f"{path}: truncated at parameter {name}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        state[name] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ParseError(f"{path}: trailing or missing bytes")
    model.load_state_dict(state)
    return model, header.get("meta", {})
