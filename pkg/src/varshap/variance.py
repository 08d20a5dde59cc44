"""Deterministic prediction variance under a diagonal Gaussian latent.

Three routes to Var[f(z)] for z ~ N(mu, diag(sigma^2)):

* ``exact_logit_variance``: sum_i w_i^2 sigma_i^2, exact when f is affine in z.
* ``delta_variance``: first-order Taylor expansion around mu,
  sum_i sigma_i^2 (df/dz_i at mu)^2.
* ``mc_variance``: sample variance over seeded draws; a test oracle only.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, NumericError
from .vrnn import VRNN, GaussianParams

METHODS = ("exact_logit", "delta", "monte_carlo")


@dataclass
class VarianceOutput:
    variance: object  # float, or ndarray for batched params
    method: str
    at_step: Optional[int] = None
    stderr: Optional[float] = None

    def __post_init__(self):
        if np.any(np.asarray(self.variance) < 0):
            raise NumericError("negative variance")


def _as_params(params):
    if isinstance(params, GaussianParams):
        return params
    mu, log_var = params
    return GaussianParams(T.as_tensor(mu), T.as_tensor(log_var))


def _scalar(v):
    v = np.asarray(v, dtype=np.float64)
    return float(v) if v.ndim == 0 else v


def exact_logit_variance(head, params, at_step=None):
    """Variance of an affine logit ``w . z + b``.

    ``head`` is the weight vector, or a VRNN whose classifier has no hidden layer.
    """
    if isinstance(head, VRNN):
        if not head.is_affine_head:
            raise ConfigurationError("exact logit variance needs a classifier with no hidden layers")
        if head.config.n_classes != 1:
            raise ConfigurationError("exact logit variance is defined for the binary head")
        w = head.head_weight().data[:, 0]
    else:
        w = np.asarray(head.data if isinstance(head, T.Tensor) else head, dtype=np.float64)
    params = _as_params(params)
    var = (w * w * params.var).sum(axis=-1)
    return VarianceOutput(_scalar(var), "exact_logit", at_step)


def delta_variance(f, params, at_step=None):
    """First-order (Delta method) variance of ``f(z)``.

    ``f`` maps a Tensor of latent rows (..., z_dim) to one value per row; rows
    are treated independently, so batched params give one variance each.
    """
    params = _as_params(params)
    g = T.gradient_of(lambda z: T.sum_(f(z)), params.mu).data
    var = (params.var * g * g).sum(axis=-1)
    return VarianceOutput(_scalar(var), "delta", at_step)


def sample_variance_stderr(values):
    """Standard error of the unbiased sample variance (fourth-moment formula)."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    c = values - values.mean()
    m2 = (c ** 2).mean()
    m4 = (c ** 4).mean()
    return float(np.sqrt(max(m4 - (n - 3) / (n - 1) * m2 * m2, 0.0) / n))


def mc_variance(f, params, n_samples, seed=0, at_step=None):
    """Unbiased sample variance of ``f(z)`` over ``n_samples`` seeded draws (single param set)."""
    if n_samples < 2:
        raise ConfigurationError("mc_variance needs n_samples >= 2")
    params = _as_params(params)
    rng = np.random.default_rng(seed)
    mu, std = params.mu.data, params.std
    z = mu + std * rng.standard_normal((n_samples, *mu.shape))
    with T.no_grad():
        vals = np.asarray(f(T.Tensor(z)).data, dtype=np.float64).reshape(n_samples, -1)
    var = vals.var(axis=0, ddof=1)
    se = sample_variance_stderr(vals[:, 0]) if vals.shape[1] == 1 else None
    return VarianceOutput(_scalar(var if var.size > 1 else var[0]), "monte_carlo", at_step, se)


def classifier_fn(model, target="prob", class_index=None):
    """The classifier as a function of z returning one scalar per row.

    ``target='prob'`` gives the predicted probability (of ``class_index`` for
    multi-class heads), ``target='logit'`` the pre-activation.
    """
    if target not in ("prob", "logit"):
        raise ConfigurationError(f"unknown target {target!r}")
    multi = model.config.n_classes > 1
    if multi and class_index is None:
        raise ConfigurationError("class_index is required for a multi-class head")

    def f(z):
        logit, prob = model.classify(z)
        out = prob if target == "prob" else logit
        return out[..., class_index] if multi else out

    return f


def wrap_variance_model(model, method="delta", target="prob", h0=None, class_index=None,
                        n_samples=10_000, seed=0):
    """Wrap ``model`` as x_prefix -> prediction variance at the prefix's last step.

    The recurrence runs in mean mode (z_s = mu_s), so the result is a pure
    function of the input. ``h0`` optionally replaces the zero initial state.
    Accepts (t, d) or (n, t, d) prefixes.
    """
    if method not in METHODS:
        raise ConfigurationError(f"unknown variance method {method!r}")
    if method == "exact_logit":
        if not model.is_affine_head:
            raise ConfigurationError("exact logit variance needs a classifier with no hidden layers")
        if target != "logit":
            raise ConfigurationError("exact_logit method explains the logit; pass target='logit'")
    f = classifier_fn(model, target, class_index)

    def variance(x):
        x = np.asarray(x, dtype=np.float64)
        params = model.final_posterior(x, h0=h0)
        step = x.shape[-2]
        if method == "exact_logit":
            return exact_logit_variance(model, params, step).variance
        if method == "delta":
            return delta_variance(f, params, step).variance
        rng = np.random.default_rng(seed)
        mu, std = params.mu.data, params.std
        z = mu + std * rng.standard_normal((n_samples, *mu.shape))
        with T.no_grad():
            vals = f(T.Tensor(z)).data
        return _scalar(vals.var(axis=0, ddof=1))

    return variance


def wrap_prediction_model(model, h0=None, class_index=None, target="prob"):
    """x_prefix -> mean-mode prediction at the prefix's last step."""
    f = classifier_fn(model, target, class_index)

    def prediction(x):
        params = model.final_posterior(x, h0=h0)
        with T.no_grad():
            return _scalar(f(params.mu).data)

    return prediction
