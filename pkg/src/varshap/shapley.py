"""Shapley attribution: KernelSHAP, an exact enumeration oracle, and episode explanations.

A game is any deterministic callable mapping a batch of flattened inputs
(n, M) to one value per row. The value of coalition S is the game averaged
over background rows whose entries in S are replaced by the explained input
(marginal imputation).
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, SolverError
from .variance import wrap_prediction_model, wrap_variance_model

GAMES = ("prediction", "variance")
MAX_EXACT_PLAYERS = 20


@dataclass
class Attribution:
    game: str
    step: int
    base_value: float
    phi: np.ndarray
    value: float
    n_coalitions: int = 0
    residual: float = 0.0
    features: list = field(default_factory=list)   # (timestep, variable, channel) per phi entry
    episode_id: Optional[int] = None
    meta: dict = field(default_factory=dict)

    @property
    def efficiency_gap(self):
        return abs(self.base_value + float(self.phi.sum()) - self.value)

    def grouped(self, key):
        """Sum phi over features sharing ``key(feature)``; valid by additivity."""
        out = {}
        for feat, p in zip(self.features, self.phi):
            k = key(feat)
            out[k] = out.get(k, 0.0) + float(p)
        return out


def _masks_from_codes(codes, m):
    return ((codes[:, None] >> np.arange(m)) & 1).astype(bool)


def coalition_values(game, x, background, masks, max_rows=65536, n_jobs=1):
    """Mean game value over background rows for each coalition mask (n, M)."""
    x = np.asarray(x, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    n_bg = background.shape[0]
    per_chunk = max(1, max_rows // n_bg)
    chunks = [masks[s:s + per_chunk] for s in range(0, len(masks), per_chunk)]

    def run(chunk):
        rows = np.where(chunk[:, None, :], x[None, None, :], background[None, :, :])
        vals = np.asarray(game(rows.reshape(-1, x.size)), dtype=np.float64)
        return vals.reshape(len(chunk), n_bg).mean(axis=1)

    if n_jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(run, chunks))  # map keeps chunk order
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts) if parts else np.zeros(0)


def shapley_kernel(m, size):
    size = np.asarray(size)
    return (m - 1) / (np.array([math.comb(m, int(s)) for s in size.ravel()]).reshape(size.shape) * size * (m - size))


def _sample_masks(m, n, rng):
    """Paired coalition sampling with sizes drawn from the kernel's size marginal."""
    sizes = np.arange(1, m)
    p = (m - 1) / (sizes * (m - sizes))
    p = p / p.sum()
    half = n // 2
    drawn = rng.choice(sizes, size=half, p=p)
    masks = np.zeros((2 * half, m), dtype=bool)
    for i, s in enumerate(drawn):
        idx = rng.choice(m, size=s, replace=False)
        masks[2 * i, idx] = True
        masks[2 * i + 1] = ~masks[2 * i]
    return masks


def _solve(masks, weights, y, delta):
    """Weighted least squares with sum(phi) == delta enforced by eliminating the last player."""
    m = masks.shape[1]
    z = masks.astype(np.float64)
    if m == 1:
        return np.array([delta]), 0.0
    a = z[:, :-1] - z[:, -1:]
    b = y - z[:, -1] * delta
    sw = np.sqrt(weights)
    aw, bw = a * sw[:, None], b * sw
    if np.linalg.matrix_rank(aw) < m - 1:
        raise SolverError(f"singular coalition design for {m} players; increase n_coalitions")
    sol, *_ = np.linalg.lstsq(aw, bw, rcond=None)
    phi = np.append(sol, delta - sol.sum())
    resid = float(np.sqrt(np.sum(weights * (b - a @ sol) ** 2) / weights.sum()))
    return phi, resid


def kernel_shap(game, x, background, n_coalitions="full", seed=0, n_background=None, n_jobs=1):
    """KernelSHAP estimate of the Shapley values of ``game`` at ``x``.

    ``n_coalitions='full'`` (or any budget covering all 2^M - 2 proper
    coalitions) enumerates every coalition, which reproduces exact Shapley
    values. Otherwise paired coalitions are sampled. ``n_background`` subsamples
    the background once; the same rows serve every coalition.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    m = x.size
    if m < 1:
        raise ConfigurationError("need at least one feature")
    if background.shape[1] != m or background.shape[0] == 0:
        raise ConfigurationError(f"background must be (N>0, {m}), got {background.shape}")
    rng = np.random.default_rng(seed)
    if n_background is not None and background.shape[0] > n_background:
        background = background[np.sort(rng.choice(background.shape[0], n_background, replace=False))]

    fx = float(np.asarray(game(x[None, :]), dtype=np.float64)[0])
    base = float(np.mean(np.asarray(game(background), dtype=np.float64)))
    delta = fx - base
    # a feature equal to x in every background row never changes a coalition's
    # value: it is a dummy player with phi = 0 and is left out of the regression
    active = np.flatnonzero(np.any(background != x, axis=0))
    phi = np.zeros(m)
    if active.size <= 1:
        phi[active] = delta
        return Attribution("", 0, base, phi, fx, 0, 0.0)
    ma = active.size

    n_proper = 2 ** ma - 2 if ma < 63 else math.inf
    if n_coalitions == "full" or (not isinstance(n_coalitions, str) and n_coalitions >= n_proper):
        if ma > MAX_EXACT_PLAYERS:
            raise ConfigurationError(f"full enumeration refused for M={ma} > {MAX_EXACT_PLAYERS}")
        masks = _masks_from_codes(np.arange(1, 2 ** ma - 1), ma)
        weights = shapley_kernel(ma, masks.sum(axis=1))
    else:
        n_coalitions = int(n_coalitions)
        if n_coalitions < ma + 2:
            raise ConfigurationError(f"n_coalitions must be >= M + 2 = {ma + 2}")
        masks = _sample_masks(ma, n_coalitions, rng)
        weights = np.ones(len(masks))
    full_masks = np.zeros((len(masks), m), dtype=bool)
    full_masks[:, active] = masks
    y = coalition_values(game, x, background, full_masks, n_jobs=n_jobs) - base
    phi[active], resid = _solve(masks, weights, y, delta)
    return Attribution("", 0, base, phi, fx, len(masks), resid)


def exact_shapley(game, x, background):
    """Shapley values by the classic weighted sum over all 2^M coalitions (M <= 20)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    m = x.size
    if m > MAX_EXACT_PLAYERS:
        raise ConfigurationError(f"exact Shapley refused for M={m} > {MAX_EXACT_PLAYERS}")
    codes = np.arange(2 ** m)
    v = coalition_values(game, x, background, _masks_from_codes(codes, m))
    sizes = np.array([bin(c).count("1") for c in codes])
    phi = np.zeros(m)
    for i in range(m):
        bit = 1 << i
        without = codes[(codes & bit) == 0]
        s = sizes[without]
        w = np.array([math.factorial(k) * math.factorial(m - k - 1) for k in s]) / math.factorial(m)
        phi[i] = np.sum(w * (v[without | bit] - v[without]))
    return Attribution("", 0, float(v[0]), phi, float(v[-1]), 2 ** m, 0.0)


# -- episodes -----------------------------------------------------------------

@dataclass
class ExplainConfig:
    window: int = 8
    n_coalitions: object = 2048
    n_background: Optional[int] = 16
    seed: int = 0
    variance_method: str = "delta"
    variance_target: str = "prob"
    class_index: Optional[int] = None
    n_jobs: int = 1


class Background:
    """Reference episodes whose windows stand in for absent features."""

    def __init__(self, episodes):
        if not episodes:
            raise ConfigurationError("background needs at least one episode")
        self.episodes = list(episodes)

    @classmethod
    def sample(cls, episodes, n, seed=0):
        rng = np.random.default_rng(seed)
        n = min(n, len(episodes))
        idx = np.sort(rng.choice(len(episodes), n, replace=False))
        return cls([episodes[i] for i in idx])

    def windows(self, step, width):
        """Windows of ``width`` steps ending at ``step`` (or at the episode end if shorter)."""
        out = []
        for e in self.episodes:
            end = min(step, len(e))
            if end >= width:
                out.append(e.x[end - width:end])
        if not out:
            raise ConfigurationError(f"no background episode has {width} steps before step {step}")
        return np.stack(out)


def _game_fn(model, game, h_ctx, width, config):
    d = model.config.input_dim
    if game == "prediction":
        inner = wrap_prediction_model(model, h0=h_ctx, class_index=config.class_index)
    elif game == "variance":
        inner = wrap_variance_model(model, method=config.variance_method, target=config.variance_target,
                                    h0=h_ctx, class_index=config.class_index)
    else:
        raise ConfigurationError(f"unknown game {game!r}; expected one of {GAMES}")

    def fn(rows):
        rows = np.asarray(rows, dtype=np.float64)
        return np.atleast_1d(inner(rows.reshape(len(rows), width, d)))

    return fn


def explain_episode(model, episode, step, games, background, config=ExplainConfig(), feature_labels=None):
    """Attributions of each requested game at ``step`` (a prefix of ``step`` timesteps).

    Features are the last ``config.window`` timesteps of the prefix, flattened
    as (timestep, feature); earlier history is always present.
    """
    L = len(episode)
    if not 1 <= step <= L:
        raise ConfigurationError(f"step {step} outside episode of length {L}")
    d = model.config.input_dim
    if feature_labels is None:
        feature_labels = [(f"x{j}", "value") for j in range(d)]
    width = min(config.window, step)
    start = step - width
    h_ctx = model.run_state(episode.x[:start]) if start > 0 else None
    x_win = episode.x[start:step].reshape(-1)
    bg = background.windows(step, width).reshape(-1, width * d)
    names = [(start + j // d, *feature_labels[j % d]) for j in range(width * d)]
    out = []
    for game in games:
        fn = _game_fn(model, game, h_ctx, width, config)
        attr = kernel_shap(fn, x_win, bg, config.n_coalitions, config.seed, config.n_background, config.n_jobs)
        attr.game, attr.step, attr.features, attr.episode_id = game, step, names, episode.episode_id
        attr.meta = {"seed": config.seed, "n_coalitions": attr.n_coalitions, "window": width,
                     "n_background": len(bg) if config.n_background is None else min(config.n_background, len(bg))}
        out.append(attr)
    return out


def explain_many(model, episodes, step, games, background, config=ExplainConfig(), feature_labels=None,
                 n_workers=1):
    """Explain episodes independently; results keep the input order."""
    def one(e):
        return explain_episode(model, e, step, games, background, config, feature_labels)

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            return list(pool.map(one, episodes))
    return [one(e) for e in episodes]


# -- export ---------------------------------------------------------------------

ATTRIBUTION_COLUMNS = ("episode_id", "step", "game", "timestep", "variable", "channel", "phi", "base_value")


def save_attributions_csv(attributions, path):
    lines = [",".join(ATTRIBUTION_COLUMNS)]
    for a in attributions:
        for (t, var, ch), p in zip(a.features, a.phi):
            lines.append(f"{a.episode_id},{a.step},{a.game},{t},{var},{ch},{float(p)!r},{a.base_value!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_attributions_csv(path):
    """Inverse of :func:`save_attributions_csv`. ``value`` is restored as base + sum(phi)."""
    groups = {}
    with open(path, encoding="utf-8") as fh:
        header = tuple(fh.readline().rstrip("\n").split(","))
        if header != ATTRIBUTION_COLUMNS:
            raise ValueError(f"{path}: unexpected attribution header {header}")
        for line in fh:
            if not line.strip():
                continue
            eid, step, game, t, var, ch, phi, base = line.rstrip("\n").split(",")
            key = (int(eid), int(step), game)
            g = groups.setdefault(key, {"base": float(base), "phi": [], "features": []})
            g["phi"].append(float(phi))
            g["features"].append((int(t), var, ch))
    out = []
    for (eid, step, game), g in groups.items():
        phi = np.array(g["phi"])
        out.append(Attribution(game, step, g["base"], phi, g["base"] + float(phi.sum()),
                               features=g["features"], episode_id=eid))
    return out


def save_attributions_json(attributions, path, meta=None):
    payload = {
        "meta": meta or {},
        "columns": list(ATTRIBUTION_COLUMNS),
        "attributions": [{
            "episode_id": a.episode_id, "step": a.step, "game": a.game,
            "base_value": a.base_value, "value": a.value, "residual": a.residual,
            "n_coalitions": a.n_coalitions, "meta": a.meta,
            "features": [list(f) for f in a.features], "phi": [float(p) for p in a.phi],
        } for a in attributions],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")
