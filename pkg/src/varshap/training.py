"""Losses and the optimisation loop for the VRNN."""

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .data import collate
from .errors import ConfigurationError, NumericError
from .vrnn import VRNN, VrnnConfig

logger = logging.getLogger(__name__)

SIGMA_MIN = 1e-4
PROB_EPS = 1e-7
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class TrainingDiverged(NumericError):
    def __init__(self, component, detail=""):
        super().__init__(f"non-finite {component} loss {detail}".strip())
        self.component = component


@dataclass
class LossBreakdown:
    kld: float
    sigma_nll: float
    clf: float
    recon: float
    reg: float
    lam: float
    clf_weight: float = 1.0

    @property
    def total(self):
        return self.kld + self.sigma_nll + self.clf_weight * self.clf + self.recon + self.lam * self.reg

    def as_record(self, **extra):
        rec = dict(extra)
        rec.update(kld=self.kld, sigma_nll=self.sigma_nll, clf=self.clf,
                   recon=self.recon, reg=self.reg, total=self.total)
        return rec


# -- per-step losses ---------------------------------------------------------

def kl_divergence(post, prior):
    """KL(post || prior) between diagonal Gaussians, summed over the last axis."""
    var_ratio = T.exp(post.log_var - prior.log_var)
    mean_term = T.square(post.mu - prior.mu) * T.exp(-prior.log_var)
    return T.sum_(0.5 * (prior.log_var - post.log_var) + 0.5 * (var_ratio + mean_term) - 0.5, axis=-1)


def sigma_nll(x_hat, x, sigma_min=SIGMA_MIN):
    """Gaussian NLL with per-element sigma = max(|x_hat - x|, sigma_min), summed over the last axis."""
    resid = T.as_tensor(x_hat) - x
    sigma = T.maximum(T.abs_(resid), sigma_min)
    terms = T.log(sigma) + T.square(resid) / (2.0 * T.square(sigma)) + HALF_LOG_2PI
    return T.sum_(terms, axis=-1)


def clf_loss(y_hat, y):
    """Cross-entropy. Binary when ``y_hat`` holds probabilities of the positive class,
    categorical when its last axis holds class probabilities and ``y`` class indices."""
    y_hat = T.as_tensor(y_hat)
    y = np.asarray(y, dtype=np.float64)
    p = T.clip(y_hat, PROB_EPS, 1.0 - PROB_EPS)
    if y_hat.shape == y.shape:
        return -(y * T.log(p) + (1.0 - y) * T.log(1.0 - p))
    onehot = np.eye(y_hat.shape[-1])[y.astype(int)]
    return -T.sum_(onehot * T.log(p), axis=-1)


def recon_loss(x_hat, x):
    return T.mean(T.square(T.as_tensor(x_hat) - x), axis=-1)


def l2_penalty(model):
    """Sum of squared weight-matrix entries (biases excluded)."""
    total = None
    for name, p in model.parameters().items():
        if name.endswith("weight"):
            term = T.sum_(T.square(p))
            total = term if total is None else total + term
    return total


def _weighted_sum(per_step, weights):
    total = None
    for t, loss in enumerate(per_step):
        w = weights[:, t]
        if not np.any(w):
            continue
        term = T.sum_(loss * w)
        total = term if total is None else total + term
    return total if total is not None else T.Tensor(0.0)


def total_loss(trace, batch, lam, model, sigma_min=SIGMA_MIN, clf_weight=1.0):
    """Return (LossBreakdown, differentiable total) for a sample-mode trace.

    Each component is averaged over an episode's valid steps, then over the batch.
    ``clf_weight`` scales the classification term (1 gives the plain sum).
    """
    n_batch = batch.x.shape[0]
    steps = len(trace)
    step_w = batch.step_mask[:, :steps] / batch.step_mask.sum(axis=1, keepdims=True) / n_batch
    label_w = batch.label_mask[:, :steps] / np.maximum(batch.label_mask.sum(axis=1, keepdims=True), 1) / n_batch

    x, y = batch.x, batch.y
    terms = {
        "kld": (lambda: [kl_divergence(q, p) for q, p in zip(trace.posterior, trace.prior)], step_w),
        "sigma_nll": (lambda: [sigma_nll(trace.x_hat[t], x[:, t], sigma_min) for t in range(steps)], step_w),
        "clf": (lambda: [clf_loss(trace.y_hat[t], y[:, t]) for t in range(steps)], label_w),
        "recon": (lambda: [recon_loss(trace.x_hat[t], x[:, t]) for t in range(steps)], step_w),
    }
    parts = {}
    for name, (per_step, weights) in terms.items():
        try:
            parts[name] = _weighted_sum(per_step(), weights)
        except NumericError as exc:
            raise TrainingDiverged(name, f"({exc})") from exc
    parts["reg"] = l2_penalty(model)
    for name, value in parts.items():
        if not np.isfinite(value.data).all():
            raise TrainingDiverged(name)
    clf = parts["clf"] if clf_weight == 1.0 else clf_weight * parts["clf"]
    total = parts["kld"] + parts["sigma_nll"] + clf + parts["recon"] + lam * parts["reg"]
    breakdown = LossBreakdown(lam=lam, clf_weight=clf_weight, **{k: v.item() for k, v in parts.items()})
    return breakdown, total


# -- metrics -------------------------------------------------------------------

def auroc(scores, labels):
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties averaged)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# -- optimiser -------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm):
    norm = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return norm


# -- loop ------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    clip_norm: float = 5.0
    lam: float = 1e-5
    patience: int = 5
    seed: int = 0
    max_steps: Optional[int] = None
    sigma_min: float = SIGMA_MIN
    clf_weight: float = 1.0


@dataclass
class TrainResult:
    model: VRNN
    history: list
    best_epoch: int
    best_metric: float


def evaluate(model, episodes, batch_size=256, lam=0.0, rng=None, max_steps=None, sigma_min=SIGMA_MIN,
             clf_weight=1.0):
    """Mean-mode metric (AUROC, or accuracy for multi-class) and a sample-mode loss breakdown."""
    scores, labels, parts = [], [], []
    rng = rng if rng is not None else np.random.default_rng(0)
    for start in range(0, len(episodes), batch_size):
        batch = collate(episodes[start:start + batch_size], max_steps=max_steps)
        with T.no_grad():
            probs = model.predict_proba(batch.x)
            trace = model.forward_sequence(batch.x, mode="sample", rng=rng)
            br, _ = total_loss(trace, batch, lam, model, sigma_min, clf_weight)
        parts.append((br, len(batch.episode_ids)))
        keep = batch.label_mask.astype(bool)
        if model.config.n_classes == 1:
            scores.append(probs[keep])
        else:
            scores.append(probs[keep].argmax(axis=-1))
        labels.append(batch.y[keep])
    scores, labels = np.concatenate(scores), np.concatenate(labels)
    if model.config.n_classes == 1:
        metric = auroc(scores, labels)
    else:
        metric = float((scores == labels).mean())
    n = sum(w for _, w in parts)
    avg = {k: sum(getattr(br, k) * w for br, w in parts) / n for k in ("kld", "sigma_nll", "clf", "recon", "reg")}
    return metric, LossBreakdown(lam=lam, clf_weight=clf_weight, **avg)


def _batches(episodes, batch_size, rng):
    order = rng.permutation(len(episodes))
    # bucket by length inside blocks of 8 batches to limit padding
    block = batch_size * 8
    out = []
    for s in range(0, len(order), block):
        chunk = sorted(order[s:s + block], key=lambda i: len(episodes[i].y))
        out.extend(chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size))
    rng.shuffle(out)
    return out


def train(train_episodes, val_episodes, model_config: VrnnConfig, config: TrainConfig = TrainConfig(),
          log_path=None):
    """Fit a VRNN with Adam and early stopping on the validation metric.

    Returns the weights of the best validation epoch. ``log_path`` receives one
    JSON record per split and epoch.
    """
    if not train_episodes:
        raise ConfigurationError("training set is empty")
    train_ids = {e.episode_id for e in train_episodes}
    if val_episodes and train_ids & {e.episode_id for e in val_episodes}:
        raise ConfigurationError("train and validation episodes overlap")

    model = VRNN(model_config)
    params = list(model.parameters().values())
    opt = Adam(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    rng = np.random.default_rng(config.seed)
    history = []
    best_state, best_metric, best_epoch, waited = model.state_dict(), -np.inf, 0, 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            sums, count = {}, 0
            for idx in _batches(train_episodes, config.batch_size, rng):
                batch = collate([train_episodes[i] for i in idx], max_steps=config.max_steps)
                trace = model.forward_sequence(batch.x, mode="sample", rng=rng)
                br, loss = total_loss(trace, batch, config.lam, model, config.sigma_min, config.clf_weight)
                T.backward(loss, params=params)
                clip_grad_norm(params, config.clip_norm)
                opt.step()
                n = len(idx)
                for k in ("kld", "sigma_nll", "clf", "recon", "reg"):
                    sums[k] = sums.get(k, 0.0) + getattr(br, k) * n
                count += n
            train_br = LossBreakdown(lam=config.lam, clf_weight=config.clf_weight, **{k: v / count for k, v in sums.items()})
            records = [train_br.as_record(epoch=epoch, split="train", auroc=None)]
            metric = float("nan")
            if val_episodes:
                metric, val_br = evaluate(model, val_episodes, lam=config.lam,
                                          rng=np.random.default_rng([config.seed, epoch]),
                                          max_steps=config.max_steps, sigma_min=config.sigma_min,
                                          clf_weight=config.clf_weight)
                records.append(val_br.as_record(epoch=epoch, split="val", auroc=metric))
            for rec in records:
                history.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
            logger.info("epoch %d train total %.4f val metric %.4f", epoch, train_br.total, metric)
            if not val_episodes:
                best_state, best_epoch = model.state_dict(), epoch
                continue
            if metric > best_metric:
                best_state, best_metric, best_epoch, waited = model.state_dict(), metric, epoch, 0
            else:
                waited += 1
                if waited >= config.patience:
                    break
    finally:
        if log_fh:
            log_fh.close()
    model.load_state_dict(best_state)
    return TrainResult(model, history, best_epoch, float(best_metric))


def train_config_dict(config):
    return asdict(config)
