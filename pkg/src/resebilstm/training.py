"""Mini-batch training with Adam and the repeated-trial protocol.

Randomness inside a trial comes from three generators derived from the
trial seed: parameter initialisation (the model spec's seed), batch
shuffling and dropout masks.  With equal seeds two runs are bit-identical.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import IO, Dict, List, Optional

import numpy as np

from . import evaluation as ev
from . import tensor as tn
from .data import CohortDataset, SampleSet, undersample
from .models import Model, ModelSpec, logits
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    patience: Optional[int] = None  # stop after this many epochs without a lower mean loss
    dropout: Optional[float] = None  # None keeps the model spec's rate
    threshold: float = 0.5

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainingError(f"epochs and batch size must be positive ({self.epochs}, {self.batch_size})")
        if self.learning_rate < 0:
            raise TrainingError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.optimizer != "adam":
            raise TrainingError(f"unknown optimizer {self.optimizer!r}; only 'adam' is available")
        if self.patience is not None and self.patience < 1:
            raise TrainingError(f"patience must be >= 1, got {self.patience}")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise TrainingError(f"dropout rate {self.dropout} outside [0, 1)")
        return self


class Adam:
    def __init__(self, params: Dict[str, np.ndarray], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    model: Model
    history: List[float]  # mean loss per epoch
    steps: int


def _train_samples(data) -> SampleSet:
    # a CohortDataset exposes its balanced training view; test data is never read
    return data.train if isinstance(data, CohortDataset) else data


def train(model: Model, data, config: TrainConfig, log_file: Optional[IO[str]] = None) -> TrainResult:
    """Fit ``model`` in place on ``data.train`` (or a bare SampleSet) by BCE + Adam."""
    config.validate()
    samples = _train_samples(data)
    if len(samples) == 0:
        raise TrainingError("no training samples")
    spec = model.spec
    rate = spec.dropout if config.dropout is None else config.dropout
    run_spec = replace(spec, dropout=rate)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2])
    opt = Adam(model.params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    X, y = samples.X, samples.y.astype(np.float64)
    n = len(y)
    history: List[float] = []
    best, stale, step = np.inf, 0, 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            try:
                with tn.GradTape() as tape:
                    p = model.tensors(requires_grad=True)
                    z = logits(run_spec, Tensor(X[idx]), p, drop_rng)
                    loss = tn.bce_with_logits(z, y[idx])
                grads = tape.gradient(loss, p)
            except tn.NonFiniteError as exc:
                raise TrainingError(f"non-finite value in epoch {epoch} batch {b} (step {step}): {exc}") from exc
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss in epoch {epoch} batch {b} (step {step})")
            opt.step(model.params, grads)
            total += value * len(idx)
            if log_file is not None:
                log_file.write(json.dumps({"epoch": epoch, "step": step, "loss": value,
                                           "seed": config.seed}) + "\n")
            step += 1
        history.append(total / n)
        log.debug("epoch %d mean loss %.6f", epoch, history[-1])
        if config.patience is not None:
            if history[-1] < best:
                best, stale = history[-1], 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    return TrainResult(model, history, step)


def evaluate_model(model: Model, samples: SampleSet, threshold: float = 0.5) -> ev.MetricsReport:
    return ev.evaluate(model.forward(samples.X), samples.y, threshold)


# --------------------------------------------------------------------------
# repeated trials
# --------------------------------------------------------------------------

@dataclass
class TrialSet:
    architecture: str
    seeds: List[int]
    reports: List[ev.MetricsReport]
    histories: List[List[float]] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    models: List[Model] = field(default_factory=list)

    def mean(self) -> Dict[str, ev.Value]:
        out = {}
        for m in ev.METRICS:
            xs = [getattr(r, m) for r in self.reports]
            out[m] = float(np.mean(xs)) if all(ev.is_defined(x) for x in xs) else ev.Undefined(f"{m}: undefined in a trial")
        return out

    def std(self, metric: str) -> float:
        xs = [getattr(r, metric) for r in self.reports]
        return float(np.std(xs)) if all(ev.is_defined(x) for x in xs) else float("nan")

    def rows(self, model: str, cohort: str) -> List[ev.MetricRow]:
        rows = [ev.MetricRow(model, cohort, str(k), r.values()) for k, r in enumerate(self.reports)]
        rows.append(ev.MetricRow(model, cohort, "mean", self.mean()))
        return rows


def _one_trial(spec: ModelSpec, dataset: CohortDataset, config: TrainConfig, k: int,
               log_dir: Optional[str] = None):
    seed = config.seed + k
    t0 = time.perf_counter()
    model = Model(replace(spec, seed=seed))
    balanced = undersample(dataset.train_pool, seed)
    if log_dir is None:
        result = train(model, balanced, replace(config, seed=seed))
    else:
        with open(Path(log_dir) / f"train_{k}.jsonl", "w") as fh:
            result = train(model, balanced, replace(config, seed=seed), log_file=fh)
    report = evaluate_model(model, dataset.test, config.threshold)
    return seed, report, result.history, time.perf_counter() - t0, model


def run_trials(spec: ModelSpec, dataset: CohortDataset, config: TrainConfig, n: int = 10,
               workers: int = 1, keep_models: bool = False, log_dir=None) -> TrialSet:
    """Train and test ``n`` independent trials; trial k uses seed ``config.seed + k``
    for initialisation, shuffling, dropout and the undersampling draw."""
    if n < 1:
        raise TrainingError(f"trial count must be >= 1, got {n}")
    config.validate()
    spec.validate()
    log_dir = None if log_dir is None else str(log_dir)
    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_one_trial, spec, dataset, config, k, log_dir) for k in range(n)]
            for k, fut in enumerate(futures):
                try:
                    results.append(fut.result())
                except Exception as exc:
                    raise TrainingError(f"trial {k} failed: {exc}") from exc
    else:
        for k in range(n):
            try:
                results.append(_one_trial(spec, dataset, config, k, log_dir))
            except Exception as exc:
                raise TrainingError(f"trial {k} failed: {exc}") from exc
            log.info("%s trial %d auc %s", spec.architecture, k, results[-1][1].auc)
    out = TrialSet(spec.architecture, [], [])
    for seed, report, history, secs, model in results:
        out.seeds.append(seed)
        out.reports.append(report)
        out.histories.append(history)
        out.seconds.append(secs)
        if keep_models:
            out.models.append(model)
    return out


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
