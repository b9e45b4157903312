"""Dataset generation and persistence, the training loop, and metrics.

A run is described by four blocks (problem / dataset / model / training),
loaded from JSON with unknown keys rejected.  Datasets are NSTF1 files
(one per split) with a JSON sidecar carrying the problem descriptor, the
seed scheme and residual certification; every persisted solution can be
re-verified against the generating operator on reload.

Training minimizes the mean squared solution error with Nadam over
minibatches whose size is a fixed fraction of the training sample count;
the test error is tracked every epoch and training stops on a relative
plateau, an optional target, or the epoch cap.  Everything is
deterministic given the seeds in the config.
"""

from __future__ import annotations

import dataclasses
import json
import subprocess
import time
from dataclasses import dataclass, field
from multiprocessing import Pool
from pathlib import Path

import numpy as np

from . import net, solvers
from .container import read_tensors, write_tensors
from .errors import ConfigError, DataError, TrainingError
from .model import MetaModel, ModelConfig, export_operator
from .solvers import ProblemSpec

RESIDUAL_TOL = 1e-10


# -- configuration ---------------------------------------------------------------

def _from_dict(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class DatasetConfig:
    n_eta: int = 500
    n_f: int = 5
    seed: int = 7


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_fraction: float = 0.01
    max_epochs: int = 500
    patience: int = 50
    min_improvement: float = 0.01
    seed: int = 0
    target_test_error: float | None = None
    operator_samples: int = 10


@dataclass(frozen=True)
class RunConfig:
    problem: ProblemSpec
    dataset: DatasetConfig
    model: ModelConfig
    training: TrainConfig

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"problem", "dataset", "model", "training"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(problem=_from_dict(ProblemSpec, d.get("problem", {})),
                  dataset=_from_dict(DatasetConfig, d.get("dataset", {})),
                  model=_from_dict(ModelConfig, d.get("model", {})),
                  training=_from_dict(TrainConfig, d.get("training", {})))
        return cfg.validate()

    def validate(self) -> "RunConfig":
        self.problem.validate()
        self.model.validate()
        if self.model.n != self.problem.n:
            raise ConfigError(
                f"model n={self.model.n} != problem n={self.problem.n}")
        if self.model.dim != self.problem.dim:
            raise ConfigError("model and problem dimensions differ")
        return self

    def to_dict(self) -> dict:
        return {"problem": dataclasses.asdict(self.problem),
                "dataset": dataclasses.asdict(self.dataset),
                "model": dataclasses.asdict(self.model),
                "training": dataclasses.asdict(self.training)}


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return RunConfig.from_dict(json.load(fh))


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply 'dotted.key=value' overrides, values parsed as JSON scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
    return d


# -- sample sets --------------------------------------------------------------------

@dataclass
class SampleSet:
    problem: ProblemSpec
    split: str
    eta: np.ndarray        # (n_eta, spatial..)
    f: np.ndarray          # (n_eta, n_f, spatial..)
    u: np.ndarray
    eta_seeds: np.ndarray  # effective seeds after any resampling
    retries: np.ndarray

    @property
    def n_eta(self) -> int:
        return self.eta.shape[0]

    @property
    def n_f(self) -> int:
        return self.f.shape[1]

    def max_residual(self) -> float:
        worst = 0.0
        for i in range(self.n_eta):
            for j in range(self.n_f):
                worst = max(worst, self.problem.residual(
                    self.eta[i], self.f[i, j], self.u[i, j]))
        return worst


def _eta_seed(base: int, i: int) -> int:
    return base + 1_000_003 * (i + 1)


def _f_seeds(base: int, i: int, n_f: int) -> list[int]:
    return [_eta_seed(base, i) + 300_000 + j for j in range(n_f)]


def _gen_one(args):
    spec_dict, eta_seed, f_seeds = args
    spec = ProblemSpec(**spec_dict)
    return solvers.generate_sample(spec, eta_seed, f_seeds)


def generate_dataset(cfg: RunConfig, out_dir, threads: int = 1) -> dict:
    """Generate, certify and persist both splits; returns a summary dict.

    Parameter draws are split half/half into train and test by index, so
    the splits never share an eta.  Per-sample seeds are a pure function
    of (dataset.seed, index), making the files bit-reproducible for any
    thread count.
    """
    cfg = cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_eta, n_f = cfg.dataset.n_eta, cfg.dataset.n_f
    base = cfg.dataset.seed
    spec_dict = dataclasses.asdict(cfg.problem)
    jobs = [(spec_dict, _eta_seed(base, i), _f_seeds(base, i, n_f))
            for i in range(n_eta)]
    if threads > 1:
        with Pool(threads) as pool:
            results = pool.map(_gen_one, jobs)
    else:
        results = [_gen_one(j) for j in jobs]

    etas = np.stack([r[0] for r in results])
    fs = np.stack([r[1] for r in results])
    us = np.stack([r[2] for r in results])
    seeds = np.array([r[3]["eta_seed"] for r in results], dtype=float)
    retries = np.array([r[3]["retries"] for r in results], dtype=float)

    n_train = n_eta // 2
    splits = {"train": slice(0, n_train), "test": slice(n_train, n_eta)}
    worst = 0.0
    for name, sl in splits.items():
        ss = SampleSet(problem=cfg.problem, split=name, eta=etas[sl],
                       f=fs[sl], u=us[sl], eta_seeds=seeds[sl],
                       retries=retries[sl])
        worst = max(worst, ss.max_residual())
        write_tensors(out / f"{name}.nstf", {
            "eta": ss.eta, "f": ss.f, "u": ss.u,
            "eta_seeds": ss.eta_seeds, "retries": ss.retries})
    if worst > RESIDUAL_TOL:
        raise DataError(f"generation residual {worst:.3e} above tolerance")

    summary = {
        "problem": spec_dict,
        "n_eta": n_eta,
        "n_f": n_f,
        "seed": base,
        "seed_scheme": "eta: seed + 1000003*(i+1); f: eta_seed + 300000 + j; "
                       "resampling bumps the eta seed by 1",
        "splits": {"train": [0, n_train], "test": [n_train, n_eta]},
        "max_residual": worst,
        "total_retries": int(retries.sum()),
    }
    with open(out / "dataset.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def load_sampleset(data_dir, split: str, check: bool = False) -> SampleSet:
    data_dir = Path(data_dir)
    with open(data_dir / "dataset.json") as fh:
        summary = json.load(fh)
    tensors = read_tensors(data_dir / f"{split}.nstf")
    ss = SampleSet(problem=ProblemSpec(**summary["problem"]), split=split,
                   eta=tensors["eta"], f=tensors["f"], u=tensors["u"],
                   eta_seeds=tensors["eta_seeds"],
                   retries=tensors["retries"])
    if check:
        worst = ss.max_residual()
        if worst > RESIDUAL_TOL:
            raise DataError(
                f"{split} split fails residual check: {worst:.3e}")
    return ss


# -- metrics -----------------------------------------------------------------------

@dataclass
class Metrics:
    train_error: float
    test_error: float
    operator_error: float | None
    epochs: int
    stop_reason: str
    wall_time: float
    loss_history: list = field(default_factory=list)
    train_error_history: list = field(default_factory=list)
    test_error_history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        return _from_dict(cls, d)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        with open(out / "metrics.json", "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        with open(out / "curves.csv", "w") as fh:
            fh.write("epoch,loss,train_error,test_error\n")
            for e, (lo, tr, te) in enumerate(zip(
                    self.loss_history, self.train_error_history,
                    self.test_error_history)):
                fh.write(f"{e},{lo:.10e},{tr:.10e},{te:.10e}\n")


def evaluate(mdl: MetaModel, ss: SampleSet, chunk_etas: int = 32) -> float:
    """Mean relative l2 solution error over every sample in the set."""
    errs = []
    for lo in range(0, ss.n_eta, chunk_etas):
        hi = min(lo + chunk_etas, ss.n_eta)
        u_hat, _ = mdl.forward_with_tape(ss.eta[lo:hi], ss.f[lo:hi])
        axes = tuple(range(2, u_hat.ndim))
        num = np.sqrt(((u_hat - ss.u[lo:hi]) ** 2).sum(axis=axes))
        den = np.sqrt((ss.u[lo:hi] ** 2).sum(axis=axes))
        errs.append((num / den).reshape(-1))
    return float(np.concatenate(errs).mean())


def power_norm2(mat: np.ndarray, tol: float = 1e-8, restarts: int = 3,
                seed: int = 0, max_iter: int = 5000) -> float:
    """Spectral norm by power iteration on G^T G, certified by restarts."""
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(restarts):
        v = rng.standard_normal(mat.shape[1])
        v /= np.linalg.norm(v)
        sigma = 0.0
        for _ in range(max_iter):
            w = mat @ v
            v_new = mat.T @ w
            norm = np.linalg.norm(v_new)
            if norm == 0.0:
                break
            v_new /= norm
            sigma_new = np.linalg.norm(mat @ v_new)
            if abs(sigma_new - sigma) <= tol * max(sigma_new, 1e-300):
                sigma = sigma_new
                break
            sigma = sigma_new
            v = v_new
        best = max(best, sigma)
    return best


def operator_error(mdl: MetaModel, problem: ProblemSpec,
                   etas: np.ndarray) -> float:
    """Mean relative spectral-norm error of the exported operator."""
    errs = []
    for eta in etas:
        g_ref = problem.reference_matrix(eta)
        g_nn = export_operator(mdl, eta)
        errs.append(power_norm2(g_ref - g_nn) / power_norm2(g_ref))
    return float(np.mean(errs))


# -- training -----------------------------------------------------------------------

def train(mdl: MetaModel, train_set: SampleSet, test_set: SampleSet,
          tcfg: TrainConfig) -> Metrics:
    """Nadam minimization of the mean squared solution error.

    Each step draws `batch_size` (eta, f) pairs; their etas are evaluated
    as one batched forward with a mask selecting the drawn pairs, so the
    eta ConvNets run once per distinct parameter draw.
    """
    if tcfg.max_epochs < 1 or tcfg.batch_fraction <= 0:
        raise ConfigError("need max_epochs >= 1 and batch_fraction > 0")
    rng = np.random.default_rng(tcfg.seed)
    n_eta, n_f = train_set.n_eta, train_set.n_f
    n_samples = n_eta * n_f
    bs = max(1, round(tcfg.batch_fraction * n_samples))
    state = net.NadamState(learning_rate=tcfg.learning_rate)
    loss_hist, train_hist, test_hist = [], [], []
    best = np.inf
    stall = 0
    stop_reason = "max_epochs"
    t0 = time.time()
    epoch = 0
    for epoch in range(1, tcfg.max_epochs + 1):
        perm = rng.permutation(n_samples)
        loss_sum = 0.0
        for lo in range(0, n_samples, bs):
            sel = perm[lo:lo + bs]
            i_idx = sel // n_f
            j_idx = sel % n_f
            uniq = np.unique(i_idx)
            rows = np.searchsorted(uniq, i_idx)
            mask = np.zeros((uniq.size, n_f))
            mask[rows, j_idx] = 1.0
            u_hat, tape = mdl.forward_with_tape(train_set.eta[uniq],
                                                train_set.f[uniq])
            mshape = mask.shape + (1,) * (u_hat.ndim - 2)
            diff = (u_hat - train_set.u[uniq]) * mask.reshape(mshape)
            with np.errstate(over="ignore"):  # inf loss = divergence signal
                loss = float((diff ** 2).sum() / sel.size)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} (step {lo // bs})")
            mdl.zero_grads()
            mdl.backward(tape, 2.0 * diff / sel.size)
            net.nadam_step(mdl.parameters(), mdl.gradients(), state)
            loss_sum += loss * sel.size
        loss_hist.append(loss_sum / n_samples)
        train_hist.append(evaluate(mdl, train_set))
        test_hist.append(evaluate(mdl, test_set))
        test_eps = test_hist[-1]
        if test_eps < best * (1.0 - tcfg.min_improvement):
            best = test_eps
            stall = 0
        else:
            stall += 1
        if tcfg.target_test_error and test_eps <= tcfg.target_test_error:
            stop_reason = "target_reached"
            break
        if stall >= tcfg.patience:
            stop_reason = "plateau"
            break
    return Metrics(train_error=train_hist[-1], test_error=test_hist[-1],
                   operator_error=None, epochs=epoch,
                   stop_reason=stop_reason, wall_time=time.time() - t0,
                   loss_history=loss_hist, train_error_history=train_hist,
                   test_error_history=test_hist)


# -- checkpoints ----------------------------------------------------------------------

def save_checkpoint(mdl: MetaModel, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensors(out / "model.nstf", mdl.parameters())
    with open(out / "model.json", "w") as fh:
        json.dump(mdl.describe(), fh, indent=2, sort_keys=True)


def load_checkpoint(ckpt_dir) -> MetaModel:
    ckpt_dir = Path(ckpt_dir)
    with open(ckpt_dir / "model.json") as fh:
        desc = json.load(fh)
    desc.pop("parameter_count", None)
    desc.pop("iwt_tied", None)
    mdl = MetaModel(ModelConfig(**desc))
    tensors = read_tensors(ckpt_dir / "model.nstf")
    params = mdl.parameters()
    if set(tensors) != set(params):
        raise DataError("checkpoint parameter names do not match the "
                        "architecture descriptor")
    for name, arr in tensors.items():
        if params[name].shape != arr.shape:
            raise DataError(f"checkpoint shape mismatch for {name}")
        params[name][...] = arr
    return mdl


# -- run metadata -----------------------------------------------------------------------

def write_run_json(out_dir, config: dict, extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"],
                              capture_output=True, text=True, timeout=10,
                              cwd=Path(__file__).parent).stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        desc = None
    payload = {"config": config, "git_describe": desc,
               "written_at_unix": time.time()}
    if extra:
        payload.update(extra)
    with open(out / "run.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
