"""Synthetic ICU episodes, feature engineering, splits and file formats.

A latent severity s_t follows an AR(1) chain around a per-patient baseline.
Variable k is measured at hour t when a Poisson process fires during that hour;
its raw reading is ``base_k + scale_k * (loading_k * u_kt + noise_k * eps)`` where
``u_kt`` tracks severity with per-variable smoothing. The label at t is 1 when
severity exceeds ``threshold`` at any of the next ``horizon`` hours.

Engineered features per variable: the forward-filled z-scored value, a mask
(1 = measured at this hour) and ``log24(1 + hours since last measurement)``.
"""

import gzip
import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .errors import ConfigurationError, ParseError

CHANNELS = ("value", "mask", "interval")
LOG24 = math.log(24.0)


@dataclass
class GeneratorConfig:
    n_variables: int = 10
    median_length: float = 60.0
    length_sigma: float = 0.45
    min_length: int = 24
    max_length: int = 120
    ar_coef: float = 0.92
    severity_noise: float = 0.3
    baseline_sd: float = 0.8
    threshold: float = 1.6
    horizon: int = 24
    loadings: tuple = (1.0, 0.8, -0.7, 0.6, 0.5, 0.4, 0.3, 0.0, 0.0, 0.0)
    obs_noise: tuple = (0.25, 0.5, 0.5, 0.6, 0.6, 0.7, 0.8, 1.0, 1.0, 1.0)
    rates: tuple = (0.12, 0.5, 0.3, 0.9, 0.4, 0.15, 0.6, 0.35, 0.8, 0.25)
    severity_coef: tuple = (0.3, 0.5, 0.3, 0.2, 0.4, 0.3, 0.3, 1.2, 0.2, 0.8)
    decay: tuple = (0.0,) * 10
    base: tuple = (120.0, 90.0, 36.8, 97.0, 20.0, 140.0, 4.0, 1.0, 10.0, 80.0)
    scale: tuple = (15.0, 10.0, 0.6, 2.0, 4.0, 30.0, 0.5, 0.3, 3.0, 12.0)
    severity_dependent: bool = True
    seed: int = 0

    def __post_init__(self):
        k = self.n_variables
        for name in ("loadings", "obs_noise", "rates", "severity_coef", "decay", "base", "scale"):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) != k:
                raise ConfigurationError(f"{name} needs {k} entries, got {len(vals)}")
            setattr(self, name, vals)
        if any(r <= 0 for r in self.rates):
            raise ConfigurationError("measurement rates must be > 0")
        if not 1 <= self.min_length <= self.max_length:
            raise ConfigurationError("need 1 <= min_length <= max_length")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")

    @property
    def variables(self):
        return [f"v{k}" for k in range(self.n_variables)]

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
            elif isinstance(v, float) and not math.isfinite(v):
                d[k] = repr(v)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k, v in d.items():
            if isinstance(v, str) and v in ("inf", "-inf"):
                d[k] = float(v)
        return cls(**d)


@dataclass
class RawEpisode:
    episode_id: int
    raw: np.ndarray        # (L, K), NaN where not measured
    y: np.ndarray          # (L,)
    severity: np.ndarray   # (L,)
    hazard: np.ndarray     # (L,) one-step exceedance probability


@dataclass
class Episode:
    episode_id: int
    x: np.ndarray          # (L, 3K)
    y: np.ndarray          # (L,)
    raw: Optional[np.ndarray] = None
    label_mask: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.y)


@dataclass
class EpisodeBatch:
    episode_ids: np.ndarray
    x: np.ndarray           # (B, T, d), zero padded
    y: np.ndarray           # (B, T)
    step_mask: np.ndarray   # (B, T) 1 on valid steps
    label_mask: np.ndarray  # (B, T) 1 where a label counts
    lengths: np.ndarray


def collate(episodes, max_steps=None):
    lengths = np.array([len(e) for e in episodes])
    if max_steps is not None:
        lengths = np.minimum(lengths, max_steps)
    n, t_max, d = len(episodes), int(lengths.max()), episodes[0].x.shape[1]
    x = np.zeros((n, t_max, d))
    y = np.zeros((n, t_max))
    step_mask = np.zeros((n, t_max))
    label_mask = np.zeros((n, t_max))
    for i, (e, L) in enumerate(zip(episodes, lengths)):
        x[i, :L] = e.x[:L]
        y[i, :L] = e.y[:L]
        step_mask[i, :L] = 1.0
        label_mask[i, :L] = 1.0 if e.label_mask is None else e.label_mask[:L]
    return EpisodeBatch(np.array([e.episode_id for e in episodes]), x, y, step_mask, label_mask, lengths)


def feature_names(variables):
    return [(v, c) for v in variables for c in CHANNELS]


# -- generation --------------------------------------------------------------

def _episode_length(cfg, rng):
    L = int(round(cfg.median_length * math.exp(cfg.length_sigma * rng.standard_normal())))
    return min(max(L, cfg.min_length), cfg.max_length)


def simulate_severity(cfg, n_steps, rng):
    """Latent chain for one patient, started from its stationary law."""
    a = cfg.ar_coef
    baseline = cfg.baseline_sd * rng.standard_normal()
    stat_sd = cfg.severity_noise / math.sqrt(1.0 - a * a) if a < 1 else 0.0
    s = np.empty(n_steps)
    s[0] = baseline + stat_sd * rng.standard_normal()
    eps = cfg.severity_noise * rng.standard_normal(n_steps)
    for t in range(1, n_steps):
        s[t] = baseline + a * (s[t - 1] - baseline) + eps[t]
    return s, baseline


def horizon_labels(s, n_steps, horizon, threshold):
    """y_t = 1 iff s exceeds ``threshold`` at some u in (t, t + horizon]."""
    above = s > threshold
    y = np.zeros(n_steps)
    for t in range(n_steps):
        y[t] = float(above[t + 1:t + 1 + horizon].any())
    return y


def generate_episode(cfg, episode_id):
    rng = np.random.default_rng([cfg.seed, episode_id])
    L = _episode_length(cfg, rng)
    s_full, baseline = simulate_severity(cfg, L + cfg.horizon, rng)
    s = s_full[:L]
    y = horizon_labels(s_full, L, cfg.horizon, cfg.threshold)
    mean_next = baseline + cfg.ar_coef * (s - baseline)
    if cfg.severity_noise > 0:
        hazard = 1.0 - ndtr((cfg.threshold - mean_next) / cfg.severity_noise)
    else:
        hazard = (mean_next > cfg.threshold).astype(float)

    K = cfg.n_variables
    decay = np.array(cfg.decay)
    u = np.empty((L, K))
    u[0] = s[0]
    for t in range(1, L):
        u[t] = decay * u[t - 1] + (1.0 - decay) * s[t]
    loadings, noise = np.array(cfg.loadings), np.array(cfg.obs_noise)
    values = np.array(cfg.base) + np.array(cfg.scale) * (loadings * u + noise * rng.standard_normal((L, K)))
    lam = np.broadcast_to(np.array(cfg.rates), (L, K))
    if cfg.severity_dependent:
        lam = lam * np.exp(np.array(cfg.severity_coef) * s[:, None])
    with np.errstate(over="ignore"):
        p_measure = -np.expm1(-lam)
    measured = rng.random((L, K)) < p_measure
    raw = np.where(measured, values, np.nan)
    return RawEpisode(episode_id, raw, y, s, hazard)


def generate(cfg: GeneratorConfig, n_episodes):
    """Generate ``n_episodes`` raw episodes; each has its own seed derived from its id."""
    return [generate_episode(cfg, i) for i in range(n_episodes)]


def chain_prevalence(cfg, n_steps=1_000_000, chain_length=100, seed=12345):
    """Label rate implied by the latent chain alone, estimated by simulation."""
    rng = np.random.default_rng(seed)
    hits = total = 0
    for _ in range(max(1, n_steps // chain_length)):
        s, _ = simulate_severity(cfg, chain_length + cfg.horizon, rng)
        y = horizon_labels(s, chain_length, cfg.horizon, cfg.threshold)
        hits += y.sum()
        total += chain_length
    return hits / total


# -- feature engineering -----------------------------------------------------

@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    median: np.ndarray

    def to_dict(self):
        return {k: [float(v) for v in getattr(self, k)] for k in ("mean", "std", "median")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.array(d[k], dtype=np.float64) for k in ("mean", "std", "median")))


def fit_normalizer(raw_episodes, variables=None):
    """Per-variable mean, std and median over actual measurements."""
    stacked = np.concatenate([e.raw for e in raw_episodes], axis=0)
    K = stacked.shape[1]
    mean, std, median = np.empty(K), np.empty(K), np.empty(K)
    for k in range(K):
        vals = stacked[:, k][~np.isnan(stacked[:, k])]
        if vals.size == 0:
            name = variables[k] if variables else f"v{k}"
            raise ConfigurationError(f"variable {name} is never measured in the training split")
        mean[k], median[k] = vals.mean(), np.median(vals)
        std[k] = vals.std() if vals.std() > 0 else 1.0
    return NormStats(mean, std, median)


def hours_to_interval(hours):
    return np.log1p(hours) / LOG24


def hours_since_measurement(mask):
    """Hours since the last measurement per column; ``t + 1`` before the first one."""
    L, K = mask.shape
    out = np.empty((L, K))
    last = np.full(K, -1.0)
    for t in range(L):
        last = np.where(mask[t], t, last)
        out[t] = t - last
    return out


def engineer_features(raw_episodes, stats: NormStats):
    """Value (forward filled, z-scored), mask and log24 interval channels per variable."""
    out = []
    for e in raw_episodes:
        mask = ~np.isnan(e.raw)
        filled = np.empty_like(e.raw)
        current = stats.median.copy()
        for t in range(len(e.raw)):
            current = np.where(mask[t], e.raw[t], current)
            filled[t] = current
        value = (filled - stats.mean) / stats.std
        interval = hours_to_interval(hours_since_measurement(mask))
        x = np.stack([value, mask.astype(float), interval], axis=-1).reshape(len(e.raw), -1)
        out.append(Episode(e.episode_id, x, e.y.copy(), raw=e.raw.copy()))
    return out


def split_channels(x):
    """(L, 3K) features -> value, mask, interval arrays of shape (L, K)."""
    x = np.asarray(x)
    return x[..., 0::3], x[..., 1::3], x[..., 2::3]


# -- splitting ---------------------------------------------------------------

def split(episodes, ratios=(0.7, 0.15, 0.15), seed=0, names=("train", "val", "test"),
          rate_tol=0.01, length_tol=0.10):
    """Deterministic split stratified on episode outcome and length.

    Episodes are ordered by (any positive label, length, random tiebreak) and dealt
    to splits so every split receives its share of each contiguous run.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if len(ratios) != len(names) or abs(ratios.sum() - 1.0) > 1e-9 or np.any(ratios <= 0):
        raise ConfigurationError("ratios must be positive and sum to 1")
    rng = np.random.default_rng(seed)
    tiebreak = rng.random(len(episodes))
    positive = np.array([float(np.any(e.y > 0)) for e in episodes])
    lengths = np.array([len(e.y) for e in episodes])
    order = np.lexsort((tiebreak, lengths, positive))
    counts = np.zeros(len(names))
    assign = {n: [] for n in names}
    for i, idx in enumerate(order):
        j = int(np.argmax(ratios * (i + 1) - counts))
        counts[j] += 1
        assign[names[j]].append(int(episodes[idx].episode_id))

    by_id = {int(e.episode_id): (p, L) for e, p, L in zip(episodes, positive, lengths)}
    global_rate, global_median = positive.mean(), np.median(lengths)
    margins = {}
    for n, ids in assign.items():
        if not ids:
            raise ConfigurationError(f"split {n} is empty")
        rate = np.mean([by_id[i][0] for i in ids])
        med = np.median([by_id[i][1] for i in ids])
        margins[n] = {"positive_rate_diff": float(rate - global_rate),
                      "median_length_rel_diff": float(med / global_median - 1.0)}
    bad = {n: m for n, m in margins.items()
           if abs(m["positive_rate_diff"]) > rate_tol or abs(m["median_length_rel_diff"]) > length_tol}
    if bad:
        raise ConfigurationError(f"stratification infeasible, achieved margins: {bad}")
    return {n: sorted(ids) for n, ids in assign.items()}


# -- persistence -------------------------------------------------------------

@dataclass
class Dataset:
    episodes: list
    variables: list
    split: dict = field(default_factory=dict)
    stats: Optional[NormStats] = None
    generator: Optional[dict] = None
    truth: Optional[dict] = None

    def subset(self, name):
        ids = set(self.split[name])
        return [e for e in self.episodes if e.episode_id in ids]

    def by_id(self):
        return {e.episode_id: e for e in self.episodes}


def build_dataset(cfg: GeneratorConfig, n_episodes, ratios=(0.7, 0.15, 0.15), rate_tol=0.01, length_tol=0.10):
    """Generate, split, fit normalisation on train only and engineer features.

    Small cohorts cannot meet the default split tolerances; loosen them explicitly.
    """
    raw = generate(cfg, n_episodes)
    parts = split(raw, ratios, seed=cfg.seed, rate_tol=rate_tol, length_tol=length_tol)
    train_ids = set(parts["train"])
    stats = fit_normalizer([e for e in raw if e.episode_id in train_ids], cfg.variables)
    episodes = engineer_features(raw, stats)
    truth = {e.episode_id: (e.severity, e.hazard) for e in raw}
    return Dataset(episodes, cfg.variables, parts, stats, cfg.to_dict(), truth)


def _fmt(v):
    return "" if v != v else repr(float(v))


def save_dataset(ds: Dataset, out_dir):
    """Write ``dataset.csv``, ``truth.csv`` (if present) and the ``dataset.json`` sidecar."""
    os.makedirs(out_dir, exist_ok=True)
    header = ["episode_id", "t", "y"]
    for v in ds.variables:
        header += [f"{v}_raw", f"{v}_value", f"{v}_mask", f"{v}_interval"]
    K = len(ds.variables)
    lines = [",".join(header)]
    for e in ds.episodes:
        value, mask, interval = split_channels(e.x)
        raw = e.raw if e.raw is not None else np.full((len(e), K), np.nan)
        for t in range(len(e)):
            row = [str(e.episode_id), str(t), repr(float(e.y[t]))]
            for k in range(K):
                row += [_fmt(raw[t, k]), repr(float(value[t, k])), repr(float(mask[t, k])),
                        repr(float(interval[t, k]))]
            lines.append(",".join(row))
    with open(os.path.join(out_dir, "dataset.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    if ds.truth:
        tl = ["episode_id,t,severity,hazard"]
        for eid in sorted(ds.truth):
            sev, haz = ds.truth[eid]
            tl.extend(f"{eid},{t},{sev[t]!r},{haz[t]!r}" for t in range(len(sev)))
        with open(os.path.join(out_dir, "truth.csv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(tl) + "\n")
    meta = {
        "variables": ds.variables,
        "channels": list(CHANNELS),
        "generator": ds.generator,
        "split": ds.split,
        "normalization": ds.stats.to_dict() if ds.stats else None,
    }
    with open(os.path.join(out_dir, "dataset.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(path):
    """Read a directory written by :func:`save_dataset`."""
    with open(os.path.join(path, "dataset.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    variables = meta["variables"]
    K = len(variables)
    with open(os.path.join(path, "dataset.csv"), encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        expected = ["episode_id", "t", "y"] + [f"{v}_{c}" for v in variables for c in ("raw",) + CHANNELS]
        if header != expected:
            raise ParseError("dataset.csv header does not match dataset.json variables")
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    episodes, cur_id, buf = [], None, []

    def flush():
        if not buf:
            return
        arr = np.array([[float(c) if c != "" else np.nan for c in r[2:]] for r in buf])
        y = arr[:, 0]
        cols = arr[:, 1:].reshape(len(buf), K, 4)
        x = cols[:, :, 1:].reshape(len(buf), 3 * K)
        episodes.append(Episode(cur_id, x, y, raw=cols[:, :, 0].copy()))

    for r in rows:
        eid = int(r[0])
        if eid != cur_id:
            flush()
            cur_id, buf = eid, []
        buf.append(r)
    flush()
    stats = NormStats.from_dict(meta["normalization"]) if meta.get("normalization") else None
    split_ = {k: [int(i) for i in v] for k, v in (meta.get("split") or {}).items()}
    return Dataset(episodes, variables, split_, stats, meta.get("generator"))


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- MNIST rows --------------------------------------------------------------

def _open(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def read_idx(path):
    """Parse an IDX file (big-endian header, unsigned-byte payload)."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ParseError(f"{path}: bad IDX magic")
    dtype_code, ndim = raw[2], raw[3]
    if dtype_code != 0x08:
        raise ParseError(f"{path}: only unsigned-byte IDX payloads are supported")
    if len(raw) < 4 + 4 * ndim:
        raise ParseError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    n = int(np.prod(dims)) if dims else 0
    payload = raw[4 + 4 * ndim:]
    if len(payload) != n:
        raise ParseError(f"{path}: payload has {len(payload)} bytes, header promises {n}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(">" + "I" * array.ndim, *array.shape)
    with (gzip.open(path, "wb") if str(path).endswith(".gz") else open(path, "wb")) as fh:
        fh.write(header + array.tobytes())


def load_mnist_rows(images_path, labels_path, limit=None):
    """Each image becomes a 28-step sequence of 28-pixel rows scaled to [0, 1];
    the class label counts only at the final step."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise ParseError("image/label IDX files do not describe the same sample set")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    out = []
    n_rows = images.shape[1]
    label_mask = np.zeros(n_rows)
    label_mask[-1] = 1.0
    for i, (img, lab) in enumerate(zip(images, labels)):
        y = np.zeros(n_rows)
        y[-1] = lab
        out.append(Episode(i, img.astype(np.float64) / 255.0, y, label_mask=label_mask))
    return out
