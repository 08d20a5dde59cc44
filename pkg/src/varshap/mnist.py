"""Row-sequence MNIST: train a 10-class VRNN and map prediction vs variance SHAP for one digit."""

import json
import os

import numpy as np

from .data import load_mnist_rows
from .shapley import Background, ExplainConfig, explain_episode, save_attributions_csv
from .training import TrainConfig, evaluate, train
from .vrnn import VrnnConfig, save_checkpoint


def abs_cosine(a, b):
    a, b = np.ravel(a), np.ravel(b)
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(abs(a @ b) / den) if den > 0 else 1.0


def run_mnist(paths, out_dir, train_limit=10000, test_limit=2000, epochs=30, hidden_dim=64, latent_dim=16,
              index=0, n_coalitions=32768, n_background=4, seed=0, val_fraction=0.1, figures=True):
    """Train, evaluate and explain; writes its outputs into ``out_dir`` and returns a summary dict.

    Blank pixels reconstruct exactly, so the sigma floor is raised to 0.1 and the
    single labelled step is weighted like a full sequence; otherwise the
    reconstruction gradient drowns the classifier.
    """
    train_all = load_mnist_rows(paths["train-images-idx3-ubyte"], paths["train-labels-idx1-ubyte"], train_limit)
    test = load_mnist_rows(paths["t10k-images-idx3-ubyte"], paths["t10k-labels-idx1-ubyte"], test_limit)
    n_val = max(1, int(round(val_fraction * len(train_all))))
    tr, va = train_all[:-n_val], train_all[-n_val:]
    for i, e in enumerate(test):  # keep ids disjoint from the training pool
        e.episode_id = len(train_all) + i

    mcfg = VrnnConfig(input_dim=28, hidden_dim=hidden_dim, latent_dim=latent_dim, mlp_dim=hidden_dim,
                      clf_layers=(hidden_dim,), n_classes=10, seed=seed)
    tcfg = TrainConfig(epochs=epochs, seed=seed, lr=3e-3, patience=8, sigma_min=0.1, clf_weight=28.0)
    res = train(tr, va, mcfg, tcfg, log_path=os.path.join(out_dir, "train_log.jsonl"))
    model = res.model
    test_acc, _ = evaluate(model, test)
    save_checkpoint(model, os.path.join(out_dir, "model.ckpt"), meta={"test_accuracy": test_acc})

    digit = test[index]
    cls = int(np.argmax(model.predict_proba(digit.x[None])[0, -1]))
    cfg = ExplainConfig(window=28, n_coalitions=n_coalitions, n_background=n_background, seed=seed,
                        class_index=cls)
    background = Background.sample(tr, 64, seed=seed)
    labels = [(f"col{j}", "pixel") for j in range(28)]
    pred, var = explain_episode(model, digit, 28, ("prediction", "variance"), background, cfg, labels)
    save_attributions_csv([pred, var], os.path.join(out_dir, "mnist_attributions.csv"))
    cos = abs_cosine(pred.phi, var.phi)
    summary = {"test_accuracy": test_acc, "val_accuracy": res.best_metric, "best_epoch": res.best_epoch,
               "n_train": len(tr), "n_val": len(va), "n_test": len(test), "index": index,
               "label": int(digit.y[-1]), "predicted": cls, "abs_cosine": cos}
    with open(os.path.join(out_dir, "mnist_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1)
        fh.write("\n")
    if figures:
        from .plotting import plot_attribution_maps

        plot_attribution_maps(digit.x, pred.phi.reshape(28, 28), var.phi.reshape(28, 28),
                              os.path.join(out_dir, "mnist_maps.png"))
    return summary
