import hashlib
import json

import numpy as np
import pytest

from nswave import container, net
from nswave import nsform as nsf
from nswave import pipeline as pl
from nswave import solvers as sv
from nswave import wavelets as wv
from nswave.errors import ConfigError, DataError
from nswave.model import MetaModel, ModelConfig, collection_from_nsform

DESK = {
    "problem": {"kind": "schrodinger", "n": 32, "eta_coarse": 4,
                "eta_scale": 10.0},
    "dataset": {"n_eta": 8, "n_f": 3, "seed": 7},
    "model": {"n": 32, "levels": 2, "alpha": 2, "depth": 2, "nb": 2, "p": 2,
              "padding": "periodic", "symmetric": True, "seed": 0},
    "training": {"learning_rate": 1e-3, "batch_fraction": 0.1,
                 "max_epochs": 3, "patience": 50, "seed": 1,
                 "operator_samples": 0},
}


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


# -- container -----------------------------------------------------------------

def test_container_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.standard_normal((3, 4)),
               "b": rng.standard_normal(7),
               "scalar": np.array(3.5)}
    path = tmp_path / "x.nstf"
    container.write_tensors(path, tensors)
    back = container.read_tensors(path)
    assert set(back) == set(tensors)
    for name in tensors:
        assert np.array_equal(back[name], np.asarray(tensors[name]))


def test_container_determinism_and_magic(tmp_path):
    tensors = {"a": np.arange(6.0).reshape(2, 3)}
    container.write_tensors(tmp_path / "1.nstf", tensors)
    container.write_tensors(tmp_path / "2.nstf", tensors)
    assert sha(tmp_path / "1.nstf") == sha(tmp_path / "2.nstf")
    raw = bytearray(open(tmp_path / "1.nstf", "rb").read())
    assert raw[:6] == b"NSTF1\x00"
    raw[0] ^= 0xFF
    (tmp_path / "bad.nstf").write_bytes(bytes(raw))
    with pytest.raises(DataError):
        container.read_tensors(tmp_path / "bad.nstf")


def test_container_detects_trailing_garbage(tmp_path):
    container.write_tensors(tmp_path / "x.nstf", {"a": np.zeros(2)})
    with open(tmp_path / "x.nstf", "ab") as fh:
        fh.write(b"junk")
    with pytest.raises(DataError):
        container.read_tensors(tmp_path / "x.nstf")


# -- configuration -----------------------------------------------------------------

def test_config_rejects_unknown_keys():
    bad = json.loads(json.dumps(DESK))
    bad["model"]["windowz"] = 3
    with pytest.raises(ConfigError):
        pl.RunConfig.from_dict(bad)
    bad2 = json.loads(json.dumps(DESK))
    bad2["extra_section"] = {}
    with pytest.raises(ConfigError):
        pl.RunConfig.from_dict(bad2)


def test_config_cross_validation():
    bad = json.loads(json.dumps(DESK))
    bad["model"]["n"] = 64
    with pytest.raises(ConfigError):
        pl.RunConfig.from_dict(bad)


def test_overrides_dotted_keys():
    d = json.loads(json.dumps(DESK))
    pl.apply_overrides(d, ["training.learning_rate=0.5",
                           "model.alpha=3",
                           "problem.kind=\"schrodinger\""])
    cfg = pl.RunConfig.from_dict(d)
    assert cfg.training.learning_rate == 0.5
    assert cfg.model.alpha == 3
    with pytest.raises(ConfigError):
        pl.apply_overrides({}, ["notakeyvalue"])


# -- dataset generation ----------------------------------------------------------

def test_generate_dataset_deterministic(tmp_path):
    cfg = pl.RunConfig.from_dict(DESK)
    pl.generate_dataset(cfg, tmp_path / "a")
    pl.generate_dataset(cfg, tmp_path / "b")
    for split in ("train", "test"):
        assert sha(tmp_path / "a" / f"{split}.nstf") \
            == sha(tmp_path / "b" / f"{split}.nstf")


def test_generate_dataset_threads_match_serial(tmp_path):
    cfg = pl.RunConfig.from_dict(DESK)
    pl.generate_dataset(cfg, tmp_path / "serial", threads=1)
    pl.generate_dataset(cfg, tmp_path / "par", threads=2)
    for split in ("train", "test"):
        assert sha(tmp_path / "serial" / f"{split}.nstf") \
            == sha(tmp_path / "par" / f"{split}.nstf")


def test_dataset_splits_disjoint_and_certified(tmp_path):
    cfg = pl.RunConfig.from_dict(DESK)
    summary = pl.generate_dataset(cfg, tmp_path)
    assert summary["max_residual"] < pl.RESIDUAL_TOL
    tr = pl.load_sampleset(tmp_path, "train", check=True)
    te = pl.load_sampleset(tmp_path, "test", check=True)
    assert tr.n_eta + te.n_eta == cfg.dataset.n_eta
    assert not set(tr.eta_seeds) & set(te.eta_seeds)


def test_reload_residual_check_catches_corruption(tmp_path):
    cfg = pl.RunConfig.from_dict(DESK)
    pl.generate_dataset(cfg, tmp_path)
    tensors = container.read_tensors(tmp_path / "train.nstf")
    tensors["u"][0, 0, 5] += 0.5
    container.write_tensors(tmp_path / "train.nstf", tensors)
    with pytest.raises(DataError):
        pl.load_sampleset(tmp_path, "train", check=True)
    # without the check the corrupted file loads silently
    pl.load_sampleset(tmp_path, "train", check=False)


# -- metrics and evaluation ---------------------------------------------------------

def test_metrics_roundtrip(tmp_path):
    m = pl.Metrics(train_error=0.1, test_error=0.2, operator_error=None,
                   epochs=3, stop_reason="max_epochs", wall_time=1.5,
                   loss_history=[1.0, 0.5], train_error_history=[0.3, 0.1],
                   test_error_history=[0.4, 0.2])
    m.save(tmp_path)
    back = pl.Metrics.from_dict(json.load(open(tmp_path / "metrics.json")))
    assert back == m
    lines = open(tmp_path / "curves.csv").read().strip().splitlines()
    assert lines[0] == "epoch,loss,train_error,test_error"
    assert len(lines) == 3


def test_power_norm2_matches_svd():
    rng = np.random.default_rng(1)
    for shape in ((16, 16), (24, 16)):
        m = rng.standard_normal(shape)
        assert pl.power_norm2(m) == pytest.approx(
            np.linalg.norm(m, 2), rel=1e-6)


def test_evaluate_is_pure_and_bitwise_repeatable(tmp_path):
    cfg = pl.RunConfig.from_dict(DESK)
    pl.generate_dataset(cfg, tmp_path)
    te = pl.load_sampleset(tmp_path, "test")
    mdl = MetaModel(cfg.model)
    e1 = pl.evaluate(mdl, te)
    e2 = pl.evaluate(mdl, te)
    assert e1 == e2


def test_operator_error_zero_for_exact_model():
    # a model that *is* the reference: collection taken from the true
    # operator, untruncated, exact filters
    spec = sv.ProblemSpec(kind="schrodinger", n=32, eta_coarse=4)
    eta = spec.sample_eta(0)
    g_ref = spec.reference_matrix(eta)
    filt = wv.daubechies_filter(2)
    ns = nsf.build_nonstandard(g_ref, filt, 2)
    cfg = ModelConfig(n=32, levels=3, alpha=1, depth=1, nb=16, p=2,
                      init_noise=0.0, seed=0)
    mdl = MetaModel(cfg)
    mdl.init_filters(filt, noise=0.0)
    coll = collection_from_nsform(ns, cfg)
    from nswave.model import export_operator
    g_nn = export_operator(mdl, eta, collection=coll)
    err = pl.power_norm2(g_ref - g_nn) / pl.power_norm2(g_ref)
    assert err < 1e-10


# -- training behavior ---------------------------------------------------------------

def test_overfit_single_sample_reaches_small_error():
    """Capacity check: one eta, one f, drive the train error below 1e-3."""
    spec = sv.ProblemSpec(kind="schrodinger", n=32, eta_coarse=4)
    eta = spec.sample_eta(3)[None]
    f = spec.sample_f(4)[None, None]
    u = spec.solve(eta[0], f[0, 0])[None, None]
    ss = pl.SampleSet(problem=spec, split="train", eta=eta, f=f, u=u,
                      eta_seeds=np.zeros(1), retries=np.zeros(1))
    mdl = MetaModel(ModelConfig(n=32, levels=2, alpha=2, depth=2, nb=2, p=2,
                                symmetric=True, seed=2))
    state = net.NadamState(learning_rate=1e-3)
    err = np.inf
    for step in range(2000):
        u_hat, tape = mdl.forward_with_tape(ss.eta, ss.f)
        diff = u_hat - ss.u
        mdl.zero_grads()
        mdl.backward(tape, 2.0 * diff)
        net.nadam_step(mdl.parameters(), mdl.gradients(), state)
        err = float(np.linalg.norm(diff) / np.linalg.norm(ss.u))
        if err <= 1e-3:
            break
    assert err <= 1e-3, f"stuck at {err:.2e} after {step} steps"


def test_warm_start_loss_equals_truncation_error():
    """With exact filters and the collection taken from the truncated true
    operator, the step-0 loss is exactly the truncation error."""
    spec = sv.ProblemSpec(kind="schrodinger", n=64, eta_coarse=8)
    eta = spec.sample_eta(5)
    g = spec.reference_matrix(eta)
    filt = wv.daubechies_filter(3)
    nb = 3
    ns = nsf.truncate(nsf.build_nonstandard(g, filt, 3), nb)
    cfg = ModelConfig(n=64, levels=3, alpha=1, depth=1, nb=nb, p=3,
                      init_noise=0.0, seed=0)
    mdl = MetaModel(cfg)
    mdl.init_filters(filt, noise=0.0)
    coll = collection_from_nsform(ns, cfg)
    fs = np.stack([spec.sample_f(100 + j) for j in range(4)])
    us = spec.solve_batch(eta, fs)
    u_hat, _ = mdl.forward_with_tape(eta, fs[None][0], collection=coll)
    model_loss = float(((u_hat[0] - us) ** 2).sum() / fs.shape[0])
    g_trunc = nsf.assemble_dense(ns, filt)
    trunc_loss = float((((g_trunc - g) @ fs.T) ** 2).sum() / fs.shape[0])
    assert model_loss == pytest.approx(trunc_loss, rel=1e-9)


def test_zero_target_degenerate_set_trains_to_zero_loss(tmp_path):
    spec = sv.ProblemSpec(kind="schrodinger", n=32, eta_coarse=4)
    eta = np.stack([spec.sample_eta(i) for i in range(2)])
    f = np.zeros((2, 2, 32))
    u = np.zeros((2, 2, 32))
    ss = pl.SampleSet(problem=spec, split="train", eta=eta, f=f, u=u,
                      eta_seeds=np.zeros(2), retries=np.zeros(2))
    mdl = MetaModel(ModelConfig(n=32, levels=2, alpha=1, depth=1, nb=1, p=1,
                                seed=0))
    u_hat, tape = mdl.forward_with_tape(ss.eta, ss.f)
    assert float((u_hat ** 2).sum()) == 0.0  # linear in f: zero in, zero out


def test_train_runs_and_metrics_are_consistent(tmp_path):
    cfg = pl.RunConfig.from_dict(DESK)
    pl.generate_dataset(cfg, tmp_path)
    tr = pl.load_sampleset(tmp_path, "train")
    te = pl.load_sampleset(tmp_path, "test")
    mdl = MetaModel(cfg.model)
    metrics = pl.train(mdl, tr, te, cfg.training)
    assert metrics.epochs == 3
    assert len(metrics.test_error_history) == 3
    assert metrics.test_error == pl.evaluate(mdl, te)
    assert metrics.train_error == pl.evaluate(mdl, tr)


def test_training_determinism_bitwise(tmp_path):
    cfg = pl.RunConfig.from_dict(DESK)
    pl.generate_dataset(cfg, tmp_path / "d")
    tr = pl.load_sampleset(tmp_path / "d", "train")
    te = pl.load_sampleset(tmp_path / "d", "test")
    for tag in ("a", "b"):
        mdl = MetaModel(cfg.model)
        pl.train(mdl, tr, te, cfg.training)
        pl.save_checkpoint(mdl, tmp_path / tag)
    assert sha(tmp_path / "a" / "model.nstf") \
        == sha(tmp_path / "b" / "model.nstf")


def test_checkpoint_roundtrip_preserves_evaluation(tmp_path):
    cfg = pl.RunConfig.from_dict(DESK)
    pl.generate_dataset(cfg, tmp_path / "d")
    te = pl.load_sampleset(tmp_path / "d", "test")
    mdl = MetaModel(cfg.model)
    pl.save_checkpoint(mdl, tmp_path / "ck")
    back = pl.load_checkpoint(tmp_path / "ck")
    assert pl.evaluate(back, te) == pl.evaluate(mdl, te)
    # tampered names are rejected
    tensors = container.read_tensors(tmp_path / "ck" / "model.nstf")
    tensors["bogus"] = np.zeros(3)
    container.write_tensors(tmp_path / "ck" / "model.nstf", tensors)
    with pytest.raises(DataError):
        pl.load_checkpoint(tmp_path / "ck")
