"""Command-line entry point: generate, train, explain, analyze, report, mnist, rerun.

Every subcommand accepts ``--config FILE``: plain text, one ``key = value`` per
line, ``#`` starts a comment, keys are the long flag names without dashes
(``batch-size`` or ``batch_size``). Flags given on the command line win.
"""

import argparse
import hashlib
import json
import logging
import os
import platform
import sys

import numpy as np

from . import __version__
from .errors import ConfigurationError, VarshapError

logger = logging.getLogger("varshap")

BOOL_TRUE = {"1", "true", "yes", "on"}
BOOL_FALSE = {"0", "false", "no", "off"}


class CliError(Exception):
    def __init__(self, message, code=2, kind="usage"):
        super().__init__(message)
        self.code = code
        self.kind = kind


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


def read_config_file(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{n}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _apply_config(parser, args, argv):
    """Fill options not given on the command line from ``--config``."""
    if not getattr(args, "config", None):
        return args
    values = read_config_file(args.config)
    given = {a.split("=", 1)[0] for a in argv if a.startswith("--")}
    actions = {a.dest: a for a in parser._actions}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("command", "config", "help"):
            raise CliError(f"{args.config}: unknown key {key!r}")
        if any(opt in given for opt in action.option_strings):
            continue
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            low = raw.lower()
            if low not in BOOL_TRUE | BOOL_FALSE:
                raise CliError(f"{args.config}: {key} expects a boolean")
            setattr(args, key, low in BOOL_TRUE)
        else:
            try:
                setattr(args, key, action.type(raw) if action.type else raw)
            except (TypeError, ValueError) as exc:
                raise CliError(f"{args.config}: bad value for {key}: {exc}") from None
    return args


def _floats(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _games(s):
    games = tuple(g.strip() for g in s.split(",") if g.strip())
    bad = [g for g in games if g not in ("prediction", "variance")]
    if bad or not games:
        raise argparse.ArgumentTypeError(f"games must be drawn from prediction,variance; got {s!r}")
    return games


def _coalitions(s):
    return s if s == "full" else int(s)


def build_parser():
    p = Parser(prog="varshap", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    g = sub.add_parser("generate", help="simulate a synthetic ICU cohort")
    g.add_argument("-v", "--verbose", action="store_true")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--episodes", type=int, default=1000)
    g.add_argument("--clean", action="store_true", help="measurement rates independent of severity")
    g.add_argument("--ratios", type=_floats, default=(0.7, 0.15, 0.15))
    g.add_argument("--threshold", type=float, default=None)
    g.add_argument("--horizon", type=int, default=None)
    g.add_argument("--median-length", type=float, default=None)

    t = sub.add_parser("train", help="fit the VRNN on a generated cohort")
    t.add_argument("-v", "--verbose", action="store_true")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--lam", type=float, default=1e-5)
    t.add_argument("--patience", type=int, default=5)
    t.add_argument("--clip-norm", type=float, default=5.0)
    t.add_argument("--hidden-dim", type=int, default=32)
    t.add_argument("--latent-dim", type=int, default=8)
    t.add_argument("--mlp-dim", type=int, default=32)
    t.add_argument("--clf-layers", type=_ints, default=(16,), help="comma list; empty for an affine head")
    t.add_argument("--max-steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("explain", help="prediction and variance SHAP at one step")
    e.add_argument("-v", "--verbose", action="store_true")
    e.add_argument("--config")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--step", type=int, default=72)
    e.add_argument("--games", type=_games, default=("prediction", "variance"))
    e.add_argument("--split", default="test")
    e.add_argument("--max-episodes", type=int, default=200)
    e.add_argument("--window", type=int, default=8)
    e.add_argument("--coalitions", type=_coalitions, default=2048)
    e.add_argument("--background", type=int, default=6000, help="episodes sampled from train")
    e.add_argument("--bg-per-coalition", type=int, default=16)
    e.add_argument("--method", choices=("delta", "exact_logit", "monte_carlo"), default="delta")
    e.add_argument("--target", choices=("prob", "logit"), default="prob")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--workers", type=int, default=1)

    a = sub.add_parser("analyze", help="interval / value relations of variance SHAP")
    a.add_argument("-v", "--verbose", action="store_true")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--attributions", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--step", type=int, default=None)
    a.add_argument("--min-records", type=int, default=30)
    a.add_argument("--no-figures", action="store_true")

    r = sub.add_parser("report", help="avoidable and should-have measurements")
    r.add_argument("-v", "--verbose", action="store_true")
    r.add_argument("--config")
    r.add_argument("--data", required=True)
    r.add_argument("--attributions", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--step", type=int, default=72)
    r.add_argument("--tau-p", type=float, default=None)
    r.add_argument("--tau-v", type=float, default=None)
    r.add_argument("--tau-m", type=float, default=None)
    r.add_argument("--percentile", type=float, default=25.0)
    r.add_argument("--no-figures", action="store_true")

    m = sub.add_parser("mnist", help="row-sequence MNIST illustration")
    m.add_argument("-v", "--verbose", action="store_true")
    m.add_argument("--config")
    m.add_argument("--idx-dir", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--train-limit", type=int, default=10000)
    m.add_argument("--test-limit", type=int, default=2000)
    m.add_argument("--epochs", type=int, default=30)
    m.add_argument("--hidden-dim", type=int, default=64)
    m.add_argument("--latent-dim", type=int, default=16)
    m.add_argument("--index", type=int, default=0, help="test image to explain")
    m.add_argument("--coalitions", type=_coalitions, default=32768)
    m.add_argument("--seed", type=int, default=0)

    rr = sub.add_parser("rerun", help="replay the command recorded in a manifest")
    rr.add_argument("-v", "--verbose", action="store_true")
    rr.add_argument("manifest")
    return p


# -- manifest --------------------------------------------------------------------

def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def write_manifest(out_dir, args, argv, outputs):
    cfg = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("verbose",)}
    # the output location does not change the results, so it stays out of the hash
    blob = json.dumps({k: v for k, v in cfg.items() if k != "out"}, sort_keys=True).encode()
    files = {}
    for name in outputs:
        path = os.path.join(out_dir, name)
        if os.path.exists(path):
            with open(path, "rb") as fh:
                files[name] = hashlib.sha256(fh.read()).hexdigest()
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "seed": getattr(args, "seed", None),
        "config": cfg,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "versions": {"varshap": __version__, "python": platform.python_version(), "numpy": np.__version__},
        "outputs": files,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


# -- subcommands -------------------------------------------------------------------

def cmd_generate(args):
    from .data import GeneratorConfig, build_dataset, save_dataset

    kw = {"seed": args.seed, "severity_dependent": not args.clean}
    for name in ("threshold", "horizon", "median_length"):
        if getattr(args, name) is not None:
            kw[name] = getattr(args, name)
    ds = build_dataset(GeneratorConfig(**kw), args.episodes, args.ratios)
    save_dataset(ds, args.out)
    return ["dataset.csv", "dataset.json", "truth.csv"]


def cmd_train(args):
    from .data import load_dataset
    from .training import TrainConfig, train
    from .vrnn import VrnnConfig, save_checkpoint

    ds = load_dataset(args.data)
    tr, va = ds.subset("train"), ds.subset("val")
    mcfg = VrnnConfig(input_dim=tr[0].x.shape[1], hidden_dim=args.hidden_dim, latent_dim=args.latent_dim,
                      mlp_dim=args.mlp_dim, clf_layers=args.clf_layers, seed=args.seed)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, clip_norm=args.clip_norm,
                       lam=args.lam, patience=args.patience, seed=args.seed, max_steps=args.max_steps)
    os.makedirs(args.out, exist_ok=True)
    res = train(tr, va, mcfg, tcfg, log_path=os.path.join(args.out, "train_log.jsonl"))
    save_checkpoint(res.model, os.path.join(args.out, "model.ckpt"),
                    meta={"best_epoch": res.best_epoch, "val_auroc": res.best_metric,
                          "variables": ds.variables})
    print(json.dumps({"best_epoch": res.best_epoch, "val_auroc": res.best_metric}))
    return ["model.ckpt", "train_log.jsonl"]


def cmd_explain(args):
    from .data import feature_names, load_dataset
    from .shapley import Background, ExplainConfig, explain_many, save_attributions_csv, save_attributions_json
    from .vrnn import load_checkpoint

    ds = load_dataset(args.data)
    model, _ = load_checkpoint(args.model)
    if args.split not in ds.split:
        raise ConfigurationError(f"unknown split {args.split!r}")
    cohort = [e for e in ds.subset(args.split) if len(e) >= args.step]
    cohort = cohort[:args.max_episodes] if args.max_episodes else cohort
    if not cohort:
        raise ConfigurationError(f"no {args.split} episode reaches step {args.step}")
    background = Background.sample(ds.subset("train"), args.background, seed=args.seed)
    cfg = ExplainConfig(window=args.window, n_coalitions=args.coalitions, n_background=args.bg_per_coalition,
                        seed=args.seed, variance_method=args.method, variance_target=args.target)
    results = explain_many(model, cohort, args.step, args.games, background, cfg,
                           feature_labels=feature_names(ds.variables), n_workers=args.workers)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    meta = {"seed": args.seed, "n_coalitions": args.coalitions, "window": args.window, "step": args.step,
            "cohort_size": len(cohort), "background": len(background.episodes),
            "bg_per_coalition": args.bg_per_coalition, "method": args.method, "target": args.target}
    for i, game in enumerate(args.games):
        attrs = [r[i] for r in results]
        save_attributions_csv(attrs, os.path.join(args.out, f"attributions_{game}.csv"))
        save_attributions_json(attrs, os.path.join(args.out, f"attributions_{game}.json"), meta)
        outputs += [f"attributions_{game}.csv", f"attributions_{game}.json"]
    return outputs


def _load_attrs(directory, game):
    from .shapley import load_attributions_csv

    path = os.path.join(directory, f"attributions_{game}.csv")
    if not os.path.exists(path):
        raise ConfigurationError(f"missing {path}")
    return load_attributions_csv(path)


def cmd_analyze(args):
    from .analysis import attribution_pairs, emit_pair_data, emit_plot_data, relation_analysis, summary_dict
    from .data import load_dataset

    ds = load_dataset(args.data)
    var_attrs = _load_attrs(args.attributions, "variance")
    records, summary = relation_analysis(var_attrs, ds.by_id(), ds.variables, args.step, args.min_records)
    os.makedirs(args.out, exist_ok=True)
    emit_plot_data(records, os.path.join(args.out, "relation_records.csv"))
    _, value_summary = relation_analysis(var_attrs, ds.by_id(), ds.variables, args.step, args.min_records,
                                         channel="value")
    with open(os.path.join(args.out, "relation_summary.json"), "w", encoding="utf-8") as fh:
        json.dump({"interval": summary_dict(summary), "value": summary_dict(value_summary)}, fh, indent=1)
        fh.write("\n")
    outputs = ["relation_records.csv", "relation_summary.json"]
    pred_path = os.path.join(args.attributions, "attributions_prediction.csv")
    pairs = []
    if os.path.exists(pred_path):
        pairs = attribution_pairs(_load_attrs(args.attributions, "prediction"), var_attrs)
        emit_pair_data(pairs, os.path.join(args.out, "pred_vs_var.csv"))
        outputs.append("pred_vs_var.csv")
    if not args.no_figures:
        from .plotting import plot_prediction_vs_variance, plot_relation

        plot_relation(records, summary, os.path.join(args.out, "relation_interval.png"))
        plot_relation(records, value_summary, os.path.join(args.out, "relation_value.png"), channel="value")
        outputs += ["relation_interval.png", "relation_value.png"]
        if pairs:
            plot_prediction_vs_variance(pairs, os.path.join(args.out, "pred_vs_var.png"))
            outputs.append("pred_vs_var.png")
    return outputs


def cmd_report(args):
    from .analysis import measurement_report, save_report_table
    from .data import load_dataset

    ds = load_dataset(args.data)
    rep = measurement_report(_load_attrs(args.attributions, "prediction"), _load_attrs(args.attributions, "variance"),
                             ds.by_id(), ds.variables, args.step, args.tau_p, args.tau_v, args.tau_m,
                             args.percentile)
    os.makedirs(args.out, exist_ok=True)
    save_report_table(rep, os.path.join(args.out, "measurement_table.csv"))
    with open(os.path.join(args.out, "measurement_report.json"), "w", encoding="utf-8") as fh:
        json.dump(rep.to_dict(), fh, indent=1)
        fh.write("\n")
    outputs = ["measurement_table.csv", "measurement_report.json"]
    if not args.no_figures:
        from .plotting import plot_report

        plot_report(rep, os.path.join(args.out, "measurement_report.png"))
        outputs.append("measurement_report.png")
    return outputs


def _find_idx(directory, stem):
    for name in (stem, stem + ".gz"):
        path = os.path.join(directory, name)
        if os.path.exists(path):
            return path
    raise ConfigurationError(f"{stem}[.gz] not found in {directory}")


def cmd_mnist(args):
    from .mnist import run_mnist

    paths = {k: _find_idx(args.idx_dir, k) for k in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                                                      "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")}
    os.makedirs(args.out, exist_ok=True)
    summary = run_mnist(paths, args.out, train_limit=args.train_limit, test_limit=args.test_limit,
                        epochs=args.epochs, hidden_dim=args.hidden_dim, latent_dim=args.latent_dim,
                        index=args.index, n_coalitions=args.coalitions, seed=args.seed)
    print(json.dumps(summary))
    return ["mnist_summary.json", "mnist_attributions.csv", "mnist_maps.png", "model.ckpt"]


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "explain": cmd_explain,
    "analyze": cmd_analyze,
    "report": cmd_report,
    "mnist": cmd_mnist,
}


def run(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "rerun":
        with open(args.manifest, encoding="utf-8") as fh:
            return run(json.load(fh)["argv"])
    sub = parser._subparsers._group_actions[0].choices[args.command]
    args = _apply_config(sub, args, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    outputs = COMMANDS[args.command](args)
    write_manifest(args.out, args, argv, outputs)
    return 0


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return run(argv)
    except SystemExit as exc:  # --help / --version
        return exc.code or 0
    except CliError as exc:
        _emit_error(exc.kind, str(exc), exc.code)
        return exc.code
    except (VarshapError, OSError, ValueError) as exc:
        _emit_error(type(exc).__name__, str(exc), 1)
        return 1


def _emit_error(kind, message, code):
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
