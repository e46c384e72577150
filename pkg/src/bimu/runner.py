"""Experiment orchestration: JSON configs, the online learning loop, evaluation
and result files.

A run writes into ``output_dir``:

``results.json``      summary metrics (byte-identical for a given config and seed)
``accmatrix.csv``     ``a[t, i]``: accuracy on task i after training through task t
``runlog.csv``        one row per stream event
``curve.csv``         current-task accuracy at evenly spaced points within each task
``query_timing.csv``  per-task share of queries in the first quarter, middle, last quarter
``posterior.bin``     final posterior (Bayesian methods)
``timing.json``       wall-clock seconds, kept apart so the files above stay reproducible

If anything fails mid-run a ``PARTIAL`` marker holding the error is written.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import active, metrics, uncertainty
from .binnet import NetworkSpec, forward, grad_lambda_mc, mc_predictive
from .numkit import RngStream, softmax
from .posterior import (
    BernoulliPosterior,
    load_checkpoint,
    probability_histogram,
    saturated_fraction,
    save_checkpoint,
)
from .rules import (
    BIMU,
    CUMULATIVE,
    METHODS,
    STE,
    BiMUConfig,
    STEState,
    bimu_step,
    cumulative_step,
    ste_step,
    training_state_bytes,
)
from .streams import (
    Standardizer,
    TaskSequence,
    imbalanced_freq,
    parse_idx,
    parse_features,
    permuted_mnist,
    synthetic_tasks,
    Task,
    uniform_noise_images,
)

PERMUTED_MNIST = "permuted-mnist"
SYNTHETIC = "synthetic"
FEATURES = "features"
STREAM_KINDS = (PERMUTED_MNIST, SYNTHETIC, FEATURES)

MNIST_FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


def _from_dict(cls, d: dict, where: str):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


@dataclass(frozen=True)
class NetworkConfig:
    layer_sizes: tuple = (784, 100, 10)
    activation: str = "rbg"
    rbg_width: float = 1.0
    bias: bool = False
    output_scale: float = 1.0

    def spec(self) -> NetworkSpec:
        return NetworkSpec(tuple(self.layer_sizes), self.activation, self.rbg_width, self.bias, self.output_scale)


@dataclass(frozen=True)
class RuleConfig:
    # BiMU
    N: float = 700.0
    alpha_max: float = 0.0023
    beta_L: float = 161.3
    beta_KL: float = 3.76
    gamma_grad: float = 4.9
    K: int = 5
    T: float = 1.0
    # cumulative baseline
    cumulative_lr: float = 0.77
    # STE + Adam
    ste_lr: float = 1e-4
    ste_weight_decay: float = 2.2e-9
    # initialization
    init_radius: float = 0.1
    prior: float = 0.0

    def bimu(self) -> BiMUConfig:
        return BiMUConfig(self.N, self.alpha_max, self.beta_L, self.beta_KL, self.gamma_grad, self.K, self.T)


@dataclass(frozen=True)
class StreamConfig:
    kind: str = PERMUTED_MNIST
    n_tasks: int = 10
    # permuted-mnist
    mnist_dir: str | None = None
    samples_per_task: int | None = None
    # synthetic
    classes: int = 10
    dims: int = 20
    radius: float = 1.0
    noise_std: float = 0.5
    events_per_class: int = 500
    low_classes: int = 0
    low_fraction: float = 1.0
    test_per_class: int = 100
    distinct_tasks: int | None = None
    # features
    train_file: str | None = None
    test_file: str | None = None
    subset: int | None = None
    subset_seed: int = 0
    standardize: bool = False
    # class-frequency flag (synthetic and features)
    low_freq_threshold: int = 0


@dataclass(frozen=True)
class ActiveConfig:
    policy: str = active.NONE
    score: str = uncertainty.VR
    tau: float = 0.0
    rate: float = 1.0
    B: float = 0.03
    gamma_budget: float = 0.01
    K_query: int = 10


@dataclass(frozen=True)
class EvalConfig:
    K: int = 5
    within_task: int = 100
    last_k: int = 3
    mmrr_epsilon: float = metrics.MMRR_EPSILON
    batch: int = 4096


@dataclass(frozen=True)
class OODConfig:
    source: str = "noise"  # "noise" or "fashion"
    fashion_dir: str | None = None
    n: int = 2000
    scores: tuple = (uncertainty.EPISTEMIC, uncertainty.ALEATORIC)
    K: int | None = None  # defaults to the active K_query


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    method: str = BIMU
    network: NetworkConfig = field(default_factory=NetworkConfig)
    rule: RuleConfig = field(default_factory=RuleConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    active: ActiveConfig = field(default_factory=ActiveConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ood: OODConfig | None = None
    output_dir: str = "runs/out"
    log_every: int = 1

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        sections = {
            "network": NetworkConfig,
            "rule": RuleConfig,
            "stream": StreamConfig,
            "active": ActiveConfig,
            "eval": EvalConfig,
        }
        kw = {k: v for k, v in d.items() if k not in sections and k != "ood"}
        for key, sub in sections.items():
            kw[key] = _from_dict(sub, d.get(key), key)
        if d.get("ood") is not None:
            kw["ood"] = _from_dict(OODConfig, d["ood"], "ood")
        cfg = cls(**kw)
        if base_dir is not None:
            cfg = cfg._resolve(Path(base_dir))
        return cfg

    def _resolve(self, base: Path) -> "ExperimentConfig":
        def fix(p):
            return None if p is None else str((base / p) if not Path(p).is_absolute() else Path(p))

        st = replace(self.stream, mnist_dir=fix(self.stream.mnist_dir), train_file=fix(self.stream.train_file),
                     test_file=fix(self.stream.test_file))
        ood = self.ood and replace(self.ood, fashion_dir=fix(self.ood.fashion_dir))
        return replace(self, stream=st, ood=ood, output_dir=fix(self.output_dir))

    def to_dict(self) -> dict:
        """Config echo for results.json; the output location is left out."""
        d = asdict(self)
        del d["output_dir"]
        d["network"]["layer_sizes"] = list(d["network"]["layer_sizes"])
        if d["ood"] is not None:
            d["ood"]["scores"] = list(d["ood"]["scores"])
        return d


def load_config(path, seed: int | None = None, check_files: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    cfg = ExperimentConfig.from_dict(raw, base_dir=path.parent)
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    validate(cfg, check_files)
    return cfg


def _mnist_path(directory, stem) -> Path:
    d = Path(directory)
    for name in (stem, stem + ".gz"):
        if (d / name).exists():
            return d / name
    raise FileNotFoundError(f"missing dataset file {d / stem}[.gz]")


def validate(cfg: ExperimentConfig, check_files: bool = True) -> None:
    """Raise ConfigError (or FileNotFoundError for missing data) on a bad config."""
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if cfg.method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}")
    try:
        spec = cfg.network.spec()
        cfg.rule.bimu()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if cfg.rule.cumulative_lr <= 0 or cfg.rule.ste_lr <= 0 or cfg.rule.init_radius < 0:
        raise ConfigError("learning rates must be positive and init_radius non-negative")
    st = cfg.stream
    if st.kind not in STREAM_KINDS:
        raise ConfigError(f"stream.kind must be one of {STREAM_KINDS}")
    if st.n_tasks < 1:
        raise ConfigError("stream.n_tasks must be >= 1")
    a = cfg.active
    if a.policy not in active.POLICIES:
        raise ConfigError(f"active.policy must be one of {active.POLICIES}")
    if a.score not in uncertainty.SCORE_KINDS:
        raise ConfigError(f"active.score must be one of {uncertainty.SCORE_KINDS}")
    if a.K_query < 1 or cfg.eval.K < 1:
        raise ConfigError("MC predictor counts must be >= 1")
    if a.policy in (active.FIXED, active.BUDGET) and cfg.method == STE and a.score != uncertainty.ALEATORIC:
        raise ConfigError("STE is deterministic; only the aleatoric score is available for querying")
    if a.policy == active.RANDOM and not 0 <= a.rate <= 1:
        raise ConfigError("active.rate must lie in [0, 1]")
    if a.policy == active.BUDGET:
        try:
            active.BudgetController(a.B, a.gamma_budget, a.K_query)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    if cfg.eval.within_task < 0 or cfg.eval.last_k < 1:
        raise ConfigError("eval.within_task must be >= 0 and eval.last_k >= 1")
    if cfg.ood is not None:
        if cfg.ood.source not in ("noise", "fashion"):
            raise ConfigError("ood.source must be 'noise' or 'fashion'")
        if cfg.method == STE and set(cfg.ood.scores) - {uncertainty.ALEATORIC, uncertainty.PREDICTIVE}:
            raise ConfigError("STE supports only aleatoric/predictive OOD scores")
        bad = set(cfg.ood.scores) - {uncertainty.PREDICTIVE, uncertainty.ALEATORIC, uncertainty.EPISTEMIC, uncertainty.VR}
        if bad:
            raise ConfigError(f"unsupported OOD scores {sorted(bad)}")
    if st.kind == PERMUTED_MNIST and spec.layer_sizes[0] != 784:
        raise ConfigError("permuted-mnist needs 784 inputs")
    if not check_files:
        return
    if st.kind == PERMUTED_MNIST:
        if st.mnist_dir is None:
            raise ConfigError("stream.mnist_dir is required for permuted-mnist")
        for stem in MNIST_FILES:
            _mnist_path(st.mnist_dir, stem)
    if st.kind == FEATURES:
        for p in (st.train_file, st.test_file):
            if p is None or not Path(p).exists():
                raise FileNotFoundError(f"missing feature file {p}")
    if cfg.ood is not None and cfg.ood.source == "fashion":
        if cfg.ood.fashion_dir is None:
            raise ConfigError("ood.fashion_dir is required for the fashion source")
        for stem in MNIST_FILES[2:]:
            _mnist_path(cfg.ood.fashion_dir, stem)


# ---------------------------------------------------------------- data


@dataclass
class PreparedStream:
    seq: TaskSequence
    standardizer: Standardizer | None = None


def build_stream(cfg: ExperimentConfig) -> PreparedStream:
    st = cfg.stream
    rng = RngStream(cfg.seed).child("stream")
    if st.kind == PERMUTED_MNIST:
        xtr, ytr = parse_idx(_mnist_path(st.mnist_dir, MNIST_FILES[0]), _mnist_path(st.mnist_dir, MNIST_FILES[1]))
        xte, yte = parse_idx(_mnist_path(st.mnist_dir, MNIST_FILES[2]), _mnist_path(st.mnist_dir, MNIST_FILES[3]))
        std = Standardizer.fit(xtr)
        seq = permuted_mnist(std(xtr), ytr, std(xte), yte, st.n_tasks, cfg.seed, st.samples_per_task)
        return PreparedStream(seq, std)
    if st.kind == SYNTHETIC:
        freq = imbalanced_freq(st.classes, st.events_per_class, st.low_classes, st.low_fraction)
        threshold = st.low_freq_threshold or (st.events_per_class if st.low_classes else 0)
        seq = synthetic_tasks(st.classes, st.dims, freq, st.noise_std, rng, st.n_tasks, st.distinct_tasks,
                              st.radius, st.test_per_class, threshold)
        return PreparedStream(seq)
    xtr, ytr = parse_features(st.train_file, st.subset, st.subset_seed)
    xte, yte = parse_features(st.test_file, st.subset, st.subset_seed)
    std = None
    if st.standardize:
        std = Standardizer.fit(xtr)
        xtr, xte = std(xtr), std(xte)
    C = int(max(ytr.max(), yte.max())) + 1
    groups = np.array_split(np.arange(C), st.n_tasks)
    order = rng.child("order").permutation(len(ytr))
    xtr, ytr = xtr[order], ytr[order]
    tasks = []
    for t, cls in enumerate(groups):
        mtr, mte = np.isin(ytr, cls), np.isin(yte, cls)
        tasks.append(Task(xtr[mtr], ytr[mtr], xte[mte], yte[mte], f"features-{t}"))
    counts = np.bincount(ytr, minlength=C)
    low = frozenset(int(c) for c in np.flatnonzero(counts < st.low_freq_threshold))
    return PreparedStream(TaskSequence(tasks, C, counts, low), std)


# ---------------------------------------------------------------- learners


class Learner:
    """Common face of the three training methods."""

    method: str
    bayesian: bool

    def predict(self, x, K: int, rng: RngStream) -> np.ndarray:
        """Softmax outputs, shape ``(K, C)`` or ``(K, B, C)``."""
        raise NotImplementedError

    def update(self, x, y: int, rng: RngStream) -> float:
        raise NotImplementedError


class PosteriorLearner(Learner):
    bayesian = True

    def __init__(self, spec: NetworkSpec, rule: RuleConfig, method: str, rng: RngStream | None = None,
                 post: BernoulliPosterior | None = None):
        self.spec = spec
        self.rule = rule
        self.method = method
        self.cfg = rule.bimu()
        if post is None:
            post = BernoulliPosterior.init_uniform(spec.weight_shapes, rng, rule.init_radius, rule.prior)
        self.post = post

    def predict(self, x, K, rng, chunk: int = 4096):
        return mc_predictive(self.spec, self.post, x, K, rng, chunk=chunk)

    def update(self, x, y, rng):
        g = grad_lambda_mc(self.spec, self.post, x, y, self.cfg.K, self.cfg.T, rng)
        if self.method == BIMU:
            bimu_step(self.post, g, self.cfg)
        else:
            cumulative_step(self.post, g, self.rule.cumulative_lr)
        return g.loss


class STELearner(Learner):
    bayesian = False
    method = STE

    def __init__(self, spec: NetworkSpec, rule: RuleConfig, rng: RngStream):
        self.spec = spec
        self.state = STEState.init_uniform(spec, rng, rule.init_radius, lr=rule.ste_lr,
                                           weight_decay=rule.ste_weight_decay)

    def predict(self, x, K, rng, chunk: int = 4096):
        # deterministic network: one "predictor"
        w = self.state.binary_weights()
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return softmax(forward(self.spec, w, x)[0])[None]
        parts = [softmax(forward(self.spec, w, x[i : i + chunk])[0]) for i in range(0, len(x), chunk)]
        return np.concatenate(parts, axis=0)[None]

    def update(self, x, y, rng):
        return ste_step(self.state, x, y, self.spec)


def make_learner(cfg: ExperimentConfig) -> Learner:
    spec = cfg.network.spec()
    rng = RngStream(cfg.seed).child("init")
    if cfg.method == STE:
        return STELearner(spec, cfg.rule, rng)
    return PosteriorLearner(spec, cfg.rule, cfg.method, rng)


# ---------------------------------------------------------------- evaluation


def predict_classes(learner: Learner, x, K: int, rng: RngStream, chunk: int = 4096) -> np.ndarray:
    """Argmax of the MC-mean softmax."""
    return learner.predict(x, K, rng, chunk=chunk).mean(axis=0).argmax(axis=-1)


def evaluate_ood(learner: Learner, x_in, x_ood, kinds, K: int, rng: RngStream) -> dict[str, float]:
    """ROC-AUC per score kind for telling ``x_ood`` apart from ``x_in``."""
    if len(x_in) == 0 or len(x_ood) == 0:
        raise ValueError("OOD evaluation needs non-empty in- and out-of-distribution sets")
    s_in = uncertainty.score_batch(learner.predict(x_in, K, rng.child("in")))
    s_out = uncertainty.score_batch(learner.predict(x_ood, K, rng.child("out")))
    return {k: uncertainty.roc_auc(s_in[k], s_out[k]) for k in kinds}


def ood_images(cfg: ExperimentConfig, prepared: PreparedStream, rng: RngStream) -> np.ndarray:
    """OOD inputs matched to the final task's preprocessing."""
    n = cfg.ood.n
    dim = prepared.seq.dim
    if cfg.ood.source == "fashion":
        x, _ = parse_idx(_mnist_path(cfg.ood.fashion_dir, MNIST_FILES[2]),
                         _mnist_path(cfg.ood.fashion_dir, MNIST_FILES[3]))
        x = x[:n]
    else:
        x = uniform_noise_images(n, dim, rng)
    if prepared.standardizer is not None:
        x = prepared.standardizer(x)
    if prepared.seq.input_perms is not None:
        x = x[:, prepared.seq.input_perms[-1]]
    return x


# ---------------------------------------------------------------- the loop


RUNLOG_COLUMNS = ("step", "task", "queried", "score", "threshold", "loss", "query_rate", "forward_passes",
                  "backward_passes")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return repr(v) if np.isfinite(v) else ("nan" if v != v else ("inf" if v > 0 else "-inf"))


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if np.isfinite(v) else None
    return v


@dataclass
class RunResult:
    results: dict
    acc_matrix: np.ndarray
    learner: Learner
    output_dir: Path


def _score_event(learner: Learner, x, y: int, kind: str, K: int, rng: RngStream) -> float:
    probs = learner.predict(x, K, rng)[:, None, :]
    if kind == uncertainty.VR_TRUE:
        return float(uncertainty.vr_true_batch(probs, [y])[0])
    return float(uncertainty.score_batch(probs)[kind][0])


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> RunResult:
    """Run one experiment end to end and write its result files."""
    validate(cfg)
    out = Path(cfg.output_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "PARTIAL").unlink(missing_ok=True)
    try:
        return _run(cfg, out, write)
    except BaseException as e:
        if write:
            (out / "PARTIAL").write_text(f"{type(e).__name__}: {e}\n", encoding="utf-8")
        raise


def _run(cfg: ExperimentConfig, out: Path, write: bool) -> RunResult:
    t_start = time.perf_counter()
    prepared = build_stream(cfg)
    seq = prepared.seq
    learner = make_learner(cfg)
    root = RngStream(cfg.seed)
    a = cfg.active
    ev = cfg.eval
    T = seq.n_tasks
    C = seq.num_classes
    if cfg.network.layer_sizes[0] != seq.dim or cfg.network.layer_sizes[-1] < C:
        raise ConfigError(f"network {cfg.network.layer_sizes} does not fit stream (dim {seq.dim}, {C} classes)")

    ctrl = active.BudgetController(a.B, a.gamma_budget, a.K_query) if a.policy == active.BUDGET else None
    K_query = a.K_query if learner.bayesian else 1
    am = np.full((T, T), np.nan)
    query_log = []
    curve = []
    rows = []
    n_updates = n_queries = 0
    fwd_total = bwd_total = 0
    step = 0

    for t, task in enumerate(seq.tasks):
        n = len(task.y_train)
        q_task = np.zeros(n, dtype=bool)
        checkpoints = set()
        if ev.within_task:
            checkpoints = {int(round((j + 1) * n / ev.within_task)) - 1 for j in range(ev.within_task)}
        for j in range(n):
            x, y = task.x_train[j], int(task.y_train[j])
            score = threshold = None
            fwd = 0
            if a.policy == active.NONE:
                query = True
            elif a.policy == active.RANDOM:
                d = active.random_decide(a.rate, root.child("random", step))
                query, score, threshold = d.query, d.score, d.threshold_used
            else:
                score = _score_event(learner, x, y, a.score, K_query, root.child("query", step))
                fwd = K_query
                d = (active.fixed_threshold_decide(score, a.tau) if a.policy == active.FIXED
                     else active.budget_decide(score, ctrl))
                if ctrl is not None:
                    active.update_counts(ctrl, d)
                query, threshold = d.query, d.threshold_used
            loss = None
            if query:
                loss = learner.update(x, y, root.child("grad", step))
                n_updates += 1
            n_queries += int(query)
            q_task[j] = query
            bwd = cfg.rule.K if (query and learner.bayesian) else int(query)
            fwd += bwd
            fwd_total += fwd
            bwd_total += bwd
            if step % cfg.log_every == 0:
                rows.append((step, t, query, score, threshold, loss, n_queries / (step + 1), fwd, bwd))
            if j in checkpoints and j != n - 1:
                pred = predict_classes(learner, task.x_test, ev.K, root.child("curve", t, j), ev.batch)
                curve.append((t, j + 1, metrics.accuracy(pred, task.y_test)))
            step += 1
        query_log.append(q_task)
        for i in range(t + 1):
            ti = seq.tasks[i]
            pred = predict_classes(learner, ti.x_test, ev.K, root.child("eval", t, i), ev.batch)
            am[t, i] = metrics.accuracy(pred, ti.y_test)
        curve.append((t, n, am[t, t]))

    last = seq.tasks[-1]
    final_pred = predict_classes(learner, last.x_test, ev.K, root.child("final"), ev.batch)
    ca = metrics.per_class_accuracy(final_pred, last.y_test, C, seq.low_freq)
    diag = np.diag(am)
    timing = metrics.query_timing(query_log)
    results = {
        "method": cfg.method,
        "seed": cfg.seed,
        "n_tasks": T,
        "n_events": step,
        "n_queries": n_queries,
        "n_updates": n_updates,
        "query_rate": n_queries / step if step else 0.0,
        "final_accuracy": list(am[T - 1, :]),
        "task_accuracy": list(diag),
        "mean_accuracy_final": float(np.mean(am[T - 1, :])),
        "mean_last_k": metrics.mean_last_k(am[T - 1, :], min(ev.last_k, T)),
        "last_k": min(ev.last_k, T),
        "mmrr": metrics.mmrr(diag, ev.mmrr_epsilon),
        "mmrr_epsilon": ev.mmrr_epsilon,
        "bwt": metrics.bwt(am) if T >= 2 else None,
        "last_task": {
            "overall": ca.overall,
            "balanced": ca.balanced,
            "low_freq": ca.low_freq,
            "high_freq": ca.high_freq,
            "per_class": list(ca.per_class),
            "low_freq_classes": sorted(seq.low_freq),
        },
        "query_timing": [list(r) for r in timing.fractions],
        "forward_passes": fwd_total,
        "backward_passes": bwd_total,
        "training_state_bytes": training_state_bytes(cfg.method, cfg.network.spec()),
        "oracle_labels_used": a.policy in (active.FIXED, active.BUDGET) and a.score == uncertainty.VR_TRUE,
        "config": cfg.to_dict(),
    }
    if learner.bayesian:
        results["saturated_fraction"] = saturated_fraction(learner.post)
        results["mean_abs_lambda"] = float(np.mean(np.concatenate([np.abs(l).ravel() for l in learner.post.lam])))
    if cfg.ood is not None:
        K_ood = cfg.ood.K or a.K_query
        K_ood = K_ood if learner.bayesian else 1
        x_ood = ood_images(cfg, prepared, root.child("ood-data"))
        x_in = last.x_test[: cfg.ood.n]
        results["ood_auc"] = evaluate_ood(learner, x_in, x_ood, cfg.ood.scores, K_ood, root.child("ood"))
        results["ood_source"] = cfg.ood.source
    results = _jsonable(results)

    if write:
        _write_outputs(out, results, am, rows, curve, timing, learner)
        (out / "timing.json").write_text(json.dumps({"seconds": time.perf_counter() - t_start}) + "\n")
    return RunResult(results, am, learner, out)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _write_outputs(out: Path, results, am, rows, curve, timing, learner) -> None:
    (out / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    T = am.shape[0]
    _write_csv(out / "accmatrix.csv", ["after_task"] + [f"task_{i}" for i in range(T)],
               [[t] + [None if np.isnan(v) else v for v in am[t]] for t in range(T)])
    _write_csv(out / "runlog.csv", RUNLOG_COLUMNS, rows)
    _write_csv(out / "curve.csv", ("task", "events_seen", "accuracy"), curve)
    _write_csv(out / "query_timing.csv", ("task", "first_quarter", "middle", "last_quarter", "empty"),
               [(t, *timing.fractions[t], bool(timing.empty[t])) for t in range(T)])
    if learner.bayesian:
        save_checkpoint(learner.post, out / "posterior.bin")


def histogram_rows(post: BernoulliPosterior, bins: int = 20):
    counts, edges = probability_histogram(post, bins)
    return [(edges[i], edges[i + 1], counts[i]) for i in range(bins)]


def eval_ood_checkpoint(checkpoint, cfg: ExperimentConfig) -> dict[str, float]:
    """OOD AUCs of a saved posterior on the config's final task."""
    if cfg.method == STE:
        raise ConfigError("eval-ood needs a Bayesian posterior checkpoint")
    post = load_checkpoint(checkpoint)
    spec = cfg.network.spec()
    if post.shapes != spec.weight_shapes:
        raise ConfigError(f"checkpoint shapes {post.shapes} do not match network {spec.weight_shapes}")
    learner = PosteriorLearner(spec, cfg.rule, cfg.method, post=post)
    prepared = build_stream(cfg)
    ood = cfg.ood or OODConfig()
    cfg = replace(cfg, ood=ood)
    root = RngStream(cfg.seed)
    x_ood = ood_images(cfg, prepared, root.child("ood-data"))
    x_in = prepared.seq.tasks[-1].x_test[: ood.n]
    return evaluate_ood(learner, x_in, x_ood, ood.scores, ood.K or cfg.active.K_query, root.child("ood"))
