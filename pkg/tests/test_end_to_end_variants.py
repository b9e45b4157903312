"""Miniature end-to-end runs of every problem family the presets ship:
divergence form, 2D elliptic, and 2D transfer, plus the non-power-of-two
full-scale geometry.  These keep the whole gen/train/eval path honest
for the variants that the desk-scale acceptance run does not cover."""

import numpy as np

from nswave import pipeline as pl
from nswave.model import MetaModel


def _cycle(raw, tmp_path, epochs=2):
    cfg = pl.RunConfig.from_dict(raw)
    pl.generate_dataset(cfg, tmp_path)
    tr = pl.load_sampleset(tmp_path, "train", check=True)
    te = pl.load_sampleset(tmp_path, "test", check=True)
    mdl = MetaModel(cfg.model)
    metrics = pl.train(mdl, tr, te, cfg.training)
    assert metrics.epochs == epochs
    assert np.isfinite(metrics.test_error)
    return cfg, mdl, te, metrics


def test_divergence_cycle(tmp_path):
    cfg, mdl, te, _ = _cycle({
        "problem": {"kind": "divergence", "n": 32, "eta_coarse": 4,
                    "eta_scale": 0.2, "eta_shift": 0.5},
        "dataset": {"n_eta": 6, "n_f": 2, "seed": 5},
        "model": {"n": 32, "levels": 2, "alpha": 2, "depth": 2, "nb": 1,
                  "p": 2, "symmetric": True, "seed": 0},
        "training": {"learning_rate": 1e-3, "batch_fraction": 0.25,
                     "max_epochs": 2, "patience": 10, "seed": 1,
                     "operator_samples": 0},
    }, tmp_path)
    # divergence operator error path (pseudo-inverse reference)
    err = pl.operator_error(mdl, cfg.problem, te.eta[:1])
    assert np.isfinite(err)


def test_schrodinger_2d_cycle(tmp_path):
    _cycle({
        "problem": {"kind": "schrodinger", "dim": 2, "n": 16,
                    "eta_coarse": 4, "eta_scale": 10.0},
        "dataset": {"n_eta": 4, "n_f": 2, "seed": 5},
        "model": {"n": 16, "levels": 2, "alpha": 2, "depth": 2, "nb": 1,
                  "p": 2, "symmetric": True, "dim": 2, "seed": 0},
        "training": {"learning_rate": 1e-4, "batch_fraction": 0.5,
                     "max_epochs": 2, "patience": 10, "seed": 1,
                     "operator_samples": 0},
    }, tmp_path)


def test_rte_2d_cycle(tmp_path):
    cfg, mdl, te, _ = _cycle({
        "problem": {"kind": "rte", "dim": 2, "n": 16, "interior": 14,
                    "eta_coarse": 4, "eta_scale": 1.0, "eta_max": 2.0,
                    "path_samples": 8},
        "dataset": {"n_eta": 4, "n_f": 2, "seed": 5},
        "model": {"n": 16, "levels": 2, "alpha": 2, "depth": 2, "nb": 1,
                  "p": 2, "padding": "zero", "symmetric": False, "dim": 2,
                  "seed": 0},
        "training": {"learning_rate": 1e-4, "batch_fraction": 0.5,
                     "max_epochs": 2, "patience": 10, "seed": 1,
                     "operator_samples": 0},
    }, tmp_path)
    err = pl.operator_error(mdl, cfg.problem, te.eta[:1])
    assert np.isfinite(err)


def test_full_scale_geometry_runs(tmp_path):
    """The 320-point geometry (non-power-of-two, odd coarsest level)
    must generate, train a step, and evaluate."""
    _cycle({
        "problem": {"kind": "schrodinger", "n": 320, "eta_coarse": 40,
                    "eta_scale": 10.0},
        "dataset": {"n_eta": 4, "n_f": 2, "seed": 5},
        "model": {"n": 320, "levels": 6, "alpha": 2, "depth": 2, "nb": 3,
                  "p": 3, "symmetric": True, "seed": 0},
        "training": {"learning_rate": 1e-3, "batch_fraction": 0.5,
                     "max_epochs": 2, "patience": 10, "seed": 1,
                     "operator_samples": 0},
    }, tmp_path)
