"""Relations between variance attributions and measurement frequency, and the
avoidable / should-have measurement report."""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .data import split_channels

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ("variable", "#avoidable", "#existing", "%", "#should-have", "#missing", "%")


@dataclass
class RelationRecord:
    episode_id: int
    step: int
    variable: str
    channel: str
    x: float
    phi: float


@dataclass
class VariableRelation:
    variable: str
    n: int
    rho: float
    p_value: float
    bin_means: list
    bin_sizes: list
    bin_ranges: list
    abnormal: bool


def _phi_lookup(attr):
    return {feat: float(p) for feat, p in zip(attr.features, attr.phi)}


def spearman(x, y):
    """Spearman rho and two-sided p; 0 and 1 when either side is constant."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) < 3 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0, 1.0
    res = spearmanr(x, y)
    return float(res.statistic), float(res.pvalue)


def quartile_bins(x, y, n_bins=4):
    """Split records into ``n_bins`` rank groups of x (stable order); bins partition the input."""
    order = np.argsort(np.asarray(x), kind="stable")
    groups = [g for g in np.array_split(order, n_bins)]
    x, y = np.asarray(x), np.asarray(y)
    means = [float(y[g].mean()) if len(g) else float("nan") for g in groups]
    sizes = [int(len(g)) for g in groups]
    ranges = [[float(x[g].min()), float(x[g].max())] if len(g) else [None, None] for g in groups]
    return means, sizes, ranges


def relation_records(attributions, episodes_by_id, variables):
    """One record per (episode, step, variable) and channel from variance attributions
    at the prefix's last timestep."""
    out = []
    for a in attributions:
        if a.game != "variance":
            continue
        t = a.step - 1
        lookup = _phi_lookup(a)
        value, _, interval = split_channels(episodes_by_id[a.episode_id].x[t])
        for k, var in enumerate(variables):
            for ch, xval in (("interval", interval[k]), ("value", value[k])):
                phi = lookup.get((t, var, ch))
                if phi is not None:
                    out.append(RelationRecord(a.episode_id, a.step, var, ch, float(xval), phi))
    return out


def relation_analysis(attributions, episodes_by_id, variables, at_step=None, min_records=30, channel="interval"):
    """Per-variable Spearman correlation between a channel's value and its variance phi.

    Returns (records, summary); variables with fewer than ``min_records`` records
    are skipped with a warning. ``at_step=None`` pools all explained steps.
    """
    attrs = [a for a in attributions if at_step is None or a.step == at_step]
    records = relation_records(attrs, episodes_by_id, variables)
    summary = {}
    for var in variables:
        rs = [r for r in records if r.variable == var and r.channel == channel]
        if len(rs) < min_records:
            logger.warning("variable %s: only %d records, skipped", var, len(rs))
            continue
        xs = [r.x for r in rs]
        ys = [r.phi for r in rs]
        rho, p = spearman(xs, ys)
        means, sizes, ranges = quartile_bins(xs, ys)
        summary[var] = VariableRelation(var, len(rs), rho, p, means, sizes, ranges, rho < 0)
    return records, summary


# -- measurement report ---------------------------------------------------------

@dataclass
class VariableCounts:
    variable: str
    n_avoidable: int
    n_existing: int
    pct_avoidable: float
    n_should_have: int
    n_missing: int
    pct_should_have: float
    n_should_have_mask: int
    n_should_have_interval: int


@dataclass
class MeasurementReport:
    step: int
    tau_p: float
    tau_v: float
    tau_m: float
    threshold_source: dict
    cohort_size: int
    rows: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _pct(num, den):
    return 100.0 * num / den if den else 0.0


def measurement_report(pred_attrs, var_attrs, episodes_by_id, variables, at_step,
                       tau_p=None, tau_v=None, tau_m=None, percentile=25.0):
    """Avoidable and should-have measurement counts per variable at ``at_step``.

    A measured variable is avoidable when |phi| of its (value, mask, interval)
    group falls below tau_p for the prediction game and below tau_v for the
    variance game. A missing variable is should-have when the variance phi of
    its mask or interval channel exceeds tau_m. Unset thresholds default to the
    given percentile of the matching |phi| distribution over the cohort.
    """
    t = at_step - 1
    pred = {a.episode_id: a for a in pred_attrs if a.step == at_step}
    var_ = {a.episode_id: a for a in var_attrs if a.step == at_step}
    ids = sorted(set(pred) & set(var_))
    K = len(variables)
    gp = np.zeros((len(ids), K))
    gv = np.zeros((len(ids), K))
    vm = np.zeros((len(ids), K))
    vi = np.zeros((len(ids), K))
    mask = np.zeros((len(ids), K), dtype=bool)
    for i, eid in enumerate(ids):
        lp, lv = _phi_lookup(pred[eid]), _phi_lookup(var_[eid])
        mask[i] = split_channels(episodes_by_id[eid].x[t])[1] > 0.5
        for k, v in enumerate(variables):
            gp[i, k] = lp[(t, v, "value")] + lp[(t, v, "mask")] + lp[(t, v, "interval")]
            gv[i, k] = lv[(t, v, "value")] + lv[(t, v, "mask")] + lv[(t, v, "interval")]
            vm[i, k] = lv[(t, v, "mask")]
            vi[i, k] = lv[(t, v, "interval")]

    source = {}

    def pick(given, values, name):
        if given is not None:
            source[name] = "absolute"
            return float(given)
        source[name] = f"p{percentile:g}"
        return float(np.percentile(np.abs(values), percentile)) if values.size else 0.0

    tau_p = pick(tau_p, gp, "tau_p")
    tau_v = pick(tau_v, gv, "tau_v")
    tau_m = pick(tau_m, np.concatenate([vm.ravel(), vi.ravel()]), "tau_m")

    avoid = mask & (np.abs(gp) < tau_p) & (np.abs(gv) < tau_v)
    sh_mask = ~mask & (vm > tau_m)
    sh_int = ~mask & (vi > tau_m)
    should = sh_mask | sh_int
    report = MeasurementReport(at_step, tau_p, tau_v, tau_m, source, len(ids))
    for k, v in enumerate(variables):
        n_ex, n_mi = int(mask[:, k].sum()), int((~mask[:, k]).sum())
        n_av, n_sh = int(avoid[:, k].sum()), int(should[:, k].sum())
        report.rows.append(VariableCounts(v, n_av, n_ex, _pct(n_av, n_ex), n_sh, n_mi, _pct(n_sh, n_mi),
                                          int(sh_mask[:, k].sum()), int(sh_int[:, k].sum())))
    return report


def report_table_lines(report):
    """Rows in the avoidable / should-have table layout."""
    lines = [",".join(TABLE_COLUMNS)]
    for r in report.rows:
        lines.append(f"{r.variable},{r.n_avoidable},{r.n_existing},{r.pct_avoidable:.2f}%,"
                     f"{r.n_should_have},{r.n_missing},{r.pct_should_have:.2f}%")
    return lines


def save_report_table(report, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(report_table_lines(report)) + "\n")


# -- plot-ready data -------------------------------------------------------------

RELATION_COLUMNS = ("episode_id", "step", "variable", "channel", "x", "phi")
PAIR_COLUMNS = ("episode_id", "step", "timestep", "variable", "channel", "phi_pred", "phi_var")


def emit_plot_data(records, path):
    lines = [",".join(RELATION_COLUMNS)]
    lines += [f"{r.episode_id},{r.step},{r.variable},{r.channel},{r.x!r},{r.phi!r}" for r in records]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def attribution_pairs(pred_attrs, var_attrs):
    """(phi_pred, phi_var) per feature for episodes explained under both games."""
    var_ = {(a.episode_id, a.step): a for a in var_attrs}
    out = []
    for a in pred_attrs:
        b = var_.get((a.episode_id, a.step))
        if b is None:
            continue
        lookup = _phi_lookup(b)
        for feat, p in zip(a.features, a.phi):
            if feat in lookup:
                out.append((a.episode_id, a.step, *feat, float(p), lookup[feat]))
    return out


def emit_pair_data(pairs, path):
    lines = [",".join(PAIR_COLUMNS)]
    lines += [",".join(str(v) if not isinstance(v, float) else repr(v) for v in row) for row in pairs]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def summary_dict(summary):
    return {k: asdict(v) for k, v in summary.items()}
