import io
import json

import numpy as np
import pytest

from resebilstm import data as D
from resebilstm import synth
from resebilstm import training as T
from resebilstm.models import Model, ModelSpec

SMALL = dict(H=8, d_head=8, heads=2, d_k=4)


def samples(X, y):
    n = len(y)
    return D.SampleSet(np.asarray(X, dtype=float), np.asarray(y), np.array([f"L{k}" for k in range(n)], dtype=object),
                       np.arange(n))


def random_set(n=16, seed=0, T_=14, F=17):
    rng = np.random.default_rng(seed)
    return samples(rng.normal(size=(n, T_, F)), np.arange(n) % 2)


@pytest.fixture(scope="module")
def tiny_cohort():
    layout = D.load_layout()
    series, _ = D.build_series(synth.generate(synth.SynthConfig(n_loans=300, seed=3)), layout)
    return D.build_cohort(series, layout, seed=3)


class TrackedSet(D.SampleSet):
    """A SampleSet that records any read of its arrays."""

    touched = False

    def __getattribute__(self, name):
        if name in ("X", "y", "loan_ids", "starts"):
            type(self).touched = True
        return super().__getattribute__(name)


def test_zero_learning_rate_keeps_parameters_bit_identical():
    model = Model(ModelSpec(seed=1))
    before = {k: v.copy() for k, v in model.params.items()}
    T.train(model, random_set(), T.TrainConfig(epochs=2, batch_size=8, learning_rate=0.0))
    assert all(model.params[k].tobytes() == before[k].tobytes() for k in before)


def test_single_sample_memorized_in_200_steps():
    model = Model(ModelSpec(seed=2))
    one = random_set(1, seed=2)
    one.y[:] = 1
    res = T.train(model, one, T.TrainConfig(epochs=200, batch_size=1))
    assert res.steps == 200
    assert res.history[-1] < 1e-2


def test_xor_sequence_task_learned_within_2000_steps():
    X = np.array([[[0.0], [0.0]], [[0.0], [1.0]], [[1.0], [0.0]], [[1.0], [1.0]]])
    y = np.array([0, 1, 1, 0])
    model = Model(ModelSpec(architecture="bilstm", T=2, F=1, H=8, d_head=8, seed=0))
    cfg = T.TrainConfig(epochs=2000, batch_size=4, learning_rate=1e-2, seed=0)
    T.train(model, samples(X, y), cfg)
    assert np.array_equal((model.forward(X) >= 0.5).astype(int), y)


def test_training_reduces_loss_on_a_learnable_task(tiny_cohort):
    model = Model(ModelSpec(seed=0, **SMALL))
    res = T.train(model, tiny_cohort, T.TrainConfig(epochs=5, batch_size=32, learning_rate=3e-3))
    assert res.history[-1] < res.history[0]


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_value_aborts_naming_the_batch():
    s = random_set(8, seed=4)
    bad = 5
    s.X[bad] = 1e200
    cfg = T.TrainConfig(epochs=1, batch_size=2, seed=9)
    order = np.random.default_rng([cfg.seed, 1]).permutation(8)
    batch = int(np.nonzero(order == bad)[0][0]) // 2
    with pytest.raises(T.TrainingError, match=f"epoch 0 batch {batch} "):
        T.train(Model(ModelSpec(seed=0)), s, cfg)


def test_same_seed_is_bit_reproducible_and_logs_are_finite():
    s = random_set(20, seed=5)
    runs = []
    for _ in range(2):
        model = Model(ModelSpec(seed=3, **SMALL))
        buf = io.StringIO()
        res = T.train(model, s, T.TrainConfig(epochs=3, batch_size=6, seed=11), log_file=buf)
        runs.append((model, res, buf.getvalue()))
    (a, ra, la), (b, rb, lb) = runs
    assert la == lb and ra.history == rb.history
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    records = [json.loads(line) for line in la.splitlines()]
    assert len(records) == 3 * 4 and [r["step"] for r in records] == list(range(12))
    assert all(set(r) == {"epoch", "step", "loss", "seed"} and np.isfinite(r["loss"]) and r["seed"] == 11
               for r in records)


def test_dropout_and_shuffle_depend_on_seed():
    s = random_set(20, seed=6)
    hist = [T.train(Model(ModelSpec(seed=3, **SMALL)), s, T.TrainConfig(epochs=2, batch_size=6, seed=k)).history
            for k in (0, 1)]
    assert hist[0] != hist[1]


def test_training_never_reads_test_samples(tiny_cohort):
    tracked = TrackedSet(tiny_cohort.test.X, tiny_cohort.test.y, tiny_cohort.test.loan_ids, tiny_cohort.test.starts)
    TrackedSet.touched = False
    ds = D.CohortDataset("c", tiny_cohort.train_pool, tiny_cohort.train, tracked, tiny_cohort.scaler,
                         tiny_cohort.layout)
    T.train(Model(ModelSpec(seed=0, **SMALL)), ds, T.TrainConfig(epochs=1, batch_size=64))
    assert not TrackedSet.touched
    T.evaluate_model(Model(ModelSpec(seed=0, **SMALL)), ds.test)
    assert TrackedSet.touched


def test_patience_stops_early():
    # one sample keeps the summation order fixed, so the frozen loss repeats exactly
    res = T.train(Model(ModelSpec(seed=0, dropout=0.0, **SMALL)), random_set(1),
                  T.TrainConfig(epochs=20, batch_size=16, learning_rate=0.0, patience=2))
    assert len(res.history) == 3


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"batch_size": 0}, {"learning_rate": -1.0}, {"optimizer": "sgd"},
                                {"patience": 0}, {"dropout": 1.0}])
def test_config_validation(kw):
    with pytest.raises(T.TrainingError):
        T.TrainConfig(**kw).validate()


def test_adam_step_by_hand():
    p = {"w": np.array([1.0, -2.0])}
    opt = T.Adam(p, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    g1, g2 = np.array([0.5, -4.0]), np.array([1.0, 2.0])
    opt.step(p, {"w": g1})
    # first step: bias-corrected moments equal g and g^2
    expect = np.array([1.0, -2.0]) - 0.1 * g1 / (np.abs(g1) + 1e-8)
    assert np.allclose(p["w"], expect, rtol=0, atol=1e-15)
    opt.step(p, {"w": g2})
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
    expect = expect - 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert np.allclose(p["w"], expect, rtol=0, atol=1e-14)


# --- trials ---------------------------------------------------------------------------

def test_single_trial_mean_equals_the_trial(tiny_cohort):
    ts = T.run_trials(ModelSpec(**SMALL), tiny_cohort, T.TrainConfig(epochs=1, batch_size=64, seed=4), n=1)
    assert ts.seeds == [4]
    assert ts.mean() == ts.reports[0].values()
    rows = ts.rows("X", "2017Q1")
    assert [r.trial for r in rows] == ["0", "mean"]


def test_trials_reproducible_and_parallel_matches_sequential(tiny_cohort, tmp_path):
    spec, cfg = ModelSpec(**SMALL), T.TrainConfig(epochs=1, batch_size=64, seed=10)
    a = T.run_trials(spec, tiny_cohort, cfg, n=3)
    b = T.run_trials(spec, tiny_cohort, cfg, n=3)
    c = T.run_trials(spec, tiny_cohort, cfg, n=3, workers=2, log_dir=tmp_path)
    assert a.seeds == [10, 11, 12]
    assert a.reports == b.reports == c.reports
    assert a.histories == c.histories
    assert sorted(p.name for p in tmp_path.iterdir()) == ["train_0.jsonl", "train_1.jsonl", "train_2.jsonl"]
    # different trials draw different undersamples and initialisations
    assert len({r.auc for r in a.reports}) > 1


def test_trial_failure_carries_its_index(tiny_cohort, monkeypatch):
    real = T.train

    def flaky(model, data, config, log_file=None):
        if config.seed == 7 + 2:
            raise T.TrainingError("boom")
        return real(model, data, config, log_file)

    monkeypatch.setattr(T, "train", flaky)
    with pytest.raises(T.TrainingError, match="trial 2 failed: boom"):
        T.run_trials(ModelSpec(**SMALL), tiny_cohort, T.TrainConfig(epochs=1, seed=7), n=4)
    with pytest.raises(T.TrainingError):
        T.run_trials(ModelSpec(**SMALL), tiny_cohort, T.TrainConfig(), n=0)
