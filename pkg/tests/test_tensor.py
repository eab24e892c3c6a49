import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import mpmath

from resebilstm import checkpoint
from resebilstm import layers as L
from resebilstm import tensor as tn
from resebilstm.tensor import Tensor


def T(x, grad=False, name=None):
    return Tensor(np.asarray(x, dtype=float), requires_grad=grad, name=name)


# --- construction and invariants ---------------------------------------------

def test_tensor_is_immutable_copy():
    src = np.ones((2, 2))
    t = Tensor(src)
    src[0, 0] = 5.0
    assert t.data[0, 0] == 1.0
    with pytest.raises(ValueError):
        t.data[0, 0] = 3.0


def test_rank_above_three_rejected():
    with pytest.raises(tn.DimensionError):
        Tensor(np.zeros((1, 1, 1, 1)))


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_is_hard_error():
    with pytest.raises(tn.NonFiniteError):
        Tensor([1.0, np.nan])
    big = T([[1e308]])
    with pytest.raises(tn.NonFiniteError):
        tn.matmul(big, T([[10.0]]))


# --- matmul ------------------------------------------------------------------

def test_matmul_identity_and_selector():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(tn.matmul(T(np.eye(2)), T(m)).data, m)
    assert np.array_equal(tn.matmul(T([[1.0, 0.0]]), T([[2.0], [3.0]])).data, [[2.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(tn.DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        tn.matmul(T(np.zeros((2, 3))), T(np.zeros((4, 2))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}
    err = tn.grad_check(lambda p: tn.sum_all(tn.matmul(p["a"], p["b"])), params)
    assert max(err.values()) <= 1e-6


def test_batched_matmul_gradient():
    rng = np.random.default_rng(1)
    params = {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(4, 5))}
    err = tn.grad_check(lambda p: tn.sum_all(tn.tanh(tn.matmul(p["a"], p["b"]))), params)
    assert max(err.values()) <= 1e-7


# --- softmax -----------------------------------------------------------------

def test_softmax_uniform_and_stable():
    assert np.allclose(tn.softmax_rows(T([[0.0, 0.0, 0.0]])).data, 1 / 3, atol=1e-15)
    out = tn.softmax_rows(T([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out)) and out[0, 0] == pytest.approx(1.0) and out[0, 1] < 1e-300


def test_softmax_matches_arbitrary_precision():
    mpmath.mp.dps = 50
    e = [mpmath.exp(v) for v in (1, 2, 3)]
    expected = [float(v / sum(e)) for v in e]
    got = tn.softmax_rows(T([[1.0, 2.0, 3.0]])).data[0]
    assert np.max(np.abs(got - expected)) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)),
                  elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_sum_to_one(x):
    out = tn.softmax_rows(Tensor(x)).data
    assert np.all(out >= 0)
    assert np.max(np.abs(out.sum(axis=-1) - 1.0)) <= 1e-12


# --- layer norm --------------------------------------------------------------

def test_layer_norm_constant_rows():
    x = T(np.full((2, 4), 5.0))
    assert np.array_equal(tn.layer_norm(x, T(np.ones(4)), T(np.zeros(4))).data, np.zeros((2, 4)))
    assert np.allclose(tn.layer_norm(x, T(np.ones(4)), T(np.full(4, 2.0))).data, 2.0, atol=0)


def test_layer_norm_statistics_direct_recomputation():
    x = np.array([[1.0, 2.0, 3.0]])
    out = tn.layer_norm(T(x), T(np.ones(3)), T(np.zeros(3)), 1e-6).data[0]
    var = np.var(x)
    assert abs(out.mean()) <= 1e-9
    assert np.var(out) == pytest.approx(var / (var + 1e-6), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 8)),
                  elements=st.floats(-1e4, 1e4)),
       st.floats(0.1, 3.0))
def test_layer_norm_mean_zero_when_beta_zero(x, g):
    F = x.shape[-1]
    out = tn.layer_norm(Tensor(x), T(np.full(F, g)), T(np.zeros(F))).data
    assert np.max(np.abs(out.mean(axis=-1))) <= 1e-9


def test_layer_norm_gradient():
    rng = np.random.default_rng(2)
    params = {"x": rng.normal(size=(3, 5)), "g": rng.normal(size=5), "b": rng.normal(size=5)}
    w = rng.normal(size=(3, 5))
    err = tn.grad_check(lambda p: tn.sum_all(tn.mul(tn.layer_norm(p["x"], p["g"], p["b"]), T(w))), params)
    assert max(err.values()) <= 1e-7


# --- elementwise -------------------------------------------------------------

def test_elementwise_semantics():
    assert tn.elementwise("sigmoid", T([0.0])).data[0] == 0.5
    assert tn.elementwise("tanh", T([0.0])).data[0] == 0.0
    assert np.array_equal(tn.elementwise("relu", T([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    assert tn.elementwise("concat_last_axis", T(np.zeros((2, 3))), T(np.ones((2, 5)))).shape == (2, 8)
    assert np.array_equal(tn.elementwise("add", T([1.0]), T([2.0])).data, [3.0])
    assert np.array_equal(tn.elementwise("mul", T([3.0]), T([2.0])).data, [6.0])


def test_elementwise_shape_mismatch():
    with pytest.raises(tn.DimensionError):
        tn.add(T(np.zeros((2, 3))), T(np.zeros((3, 2))))
    with pytest.raises(tn.DimensionError):
        tn.concat_last_axis(T(np.zeros((2, 3))), T(np.zeros((3, 3))))
    with pytest.raises(ValueError):
        tn.elementwise("softplus", T([1.0]))


@pytest.mark.parametrize("kind", ["relu", "sigmoid", "tanh"])
def test_unary_gradients(kind):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 3))
    x[np.abs(x) < 1e-3] = 0.5  # keep relu away from its kink
    err = tn.grad_check(lambda p: tn.sum_all(tn.mul(tn.elementwise(kind, p["x"]), T(x))), {"x": x})
    assert err["x"] <= 1e-7


def test_structural_kernel_gradients():
    rng = np.random.default_rng(4)
    params = {"x": rng.normal(size=(2, 5, 3)), "y": rng.normal(size=(2, 5, 2))}
    w = rng.normal(size=(2, 3, 3))

    def f(p):
        cat = tn.concat_last_axis(p["x"], p["y"])  # 2 x 5 x 5
        steps = [tn.take_step(cat, t) for t in (4, 0, 2)]
        stacked = tn.stack_steps(steps)  # 2 x 3 x 5
        part = tn.slice_axis(stacked, -1, 1, 4)  # 2 x 3 x 3
        flat = tn.reshape(part, (2, 9))
        pooled = tn.max_over_axis(tn.unfold_time(p["x"], 2), axis=1)
        return tn.add(tn.sum_all(tn.mul(part, T(w))),
                      tn.add(tn.sum_all(tn.mul(flat, flat)), tn.sum_all(pooled)))

    err = tn.grad_check(f, params)
    assert max(err.values()) <= 1e-7


def test_dropout_identity_without_rng_and_scaled_with():
    x = T(np.ones((50, 40)))
    assert tn.dropout(x, 0.1, None) is x
    assert tn.dropout(x, 0.0, np.random.default_rng(0)) is x
    out = tn.dropout(x, 0.25, np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
    assert abs((out == 0).mean() - 0.25) < 0.03


def test_bce_with_logits_matches_formula_and_gradient():
    z = np.array([[-2.0], [0.5], [30.0]])
    y = np.array([0.0, 1.0, 0.0])
    mpmath.mp.dps = 50
    terms = []
    for zi, yi in zip(z[:, 0], y):
        p = 1 / (1 + mpmath.exp(-mpmath.mpf(zi)))
        terms.append(-(yi * mpmath.log(p) + (1 - yi) * mpmath.log(1 - p)))
    expected = float(sum(terms) / len(terms))
    assert tn.bce_with_logits(T(z), y).item() == pytest.approx(expected, rel=1e-12)
    err = tn.grad_check(lambda q: tn.bce_with_logits(q["z"], y), {"z": z})
    assert err["z"] <= 1e-6


# --- tape --------------------------------------------------------------------

def test_backward_sum_gives_ones_and_zero_scale_gives_zeros():
    w = T(np.arange(6.0).reshape(2, 3), grad=True, name="w")
    with tn.GradTape() as tape:
        loss = tn.sum_all(w)
    assert np.array_equal(tn.backward(tape, loss, {"w": w})["w"], np.ones((2, 3)))
    with tn.GradTape() as tape:
        loss = tn.sum_all(tn.scale(w, 0.0))
    assert np.array_equal(tape.gradient(loss, [w])["w"], np.zeros((2, 3)))


def test_unused_parameter_gets_zero_gradient():
    a = T([1.0, 2.0], grad=True)
    b = T([3.0], grad=True)
    with tn.GradTape() as tape:
        loss = tn.sum_all(tn.mul(a, a))
    g = tape.gradient(loss, {"a": a, "b": b})
    assert np.array_equal(g["a"], [2.0, 4.0]) and np.array_equal(g["b"], [0.0])


def test_non_scalar_loss_is_contract_error():
    a = T([1.0, 2.0], grad=True)
    with tn.GradTape() as tape:
        out = tn.relu(a)
    with pytest.raises(tn.ContractError):
        tape.gradient(out, {"a": a})


def test_tape_replays_in_exact_reverse_order():
    a = T([[0.3, -0.2]], grad=True)
    seen = []
    with tn.GradTape() as tape:
        h = tn.tanh(a)
        s = tn.sigmoid(h)
        loss = tn.sum_all(tn.mul(s, h))
    recorded = [n.op for n in tape.nodes]
    assert recorded == ["tanh", "sigmoid", "mul", "sum_all"]
    for node in tape.nodes:
        orig = node.backward
        node.backward = (lambda o, op: lambda g: (seen.append(op), o(g))[1])(orig, node.op)
    tape.gradient(loss, {"a": a})
    assert seen == recorded[::-1]


def test_gradients_deterministic():
    rng = np.random.default_rng(5)
    params = {"w": rng.normal(size=(4, 4))}
    x = T(rng.normal(size=(3, 4)))

    def run():
        p = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        with tn.GradTape() as tape:
            loss = tn.sum_all(tn.tanh(tn.matmul(x, p["w"])))
        return tape.gradient(loss, p)["w"]

    assert run().tobytes() == run().tobytes()


def test_no_tape_means_no_recording():
    a = T([1.0], grad=True)
    with tn.GradTape() as tape:
        pass
    tn.relu(a)
    assert tape.nodes == []


# --- grad_check ----------------------------------------------------------------

def test_grad_check_linear_model_exact():
    x = T([[1.5, -2.0, 0.25]])
    err = tn.grad_check(lambda p: tn.sum_all(tn.matmul(x, p["w"])), {"w": np.array([[0.3], [0.1], [-0.7]])})
    assert err["w"] <= 1e-9


def test_grad_check_single_lstm_step():
    rng = np.random.default_rng(6)
    F, H = 3, 4
    params = {f"w_{g}": rng.normal(scale=0.5, size=(H, F + H)) for g in L.GATES}
    params.update({f"b_{g}": rng.normal(scale=0.1, size=H) for g in L.GATES})
    params.update(x=rng.normal(size=(1, F)), h=rng.normal(size=(1, H)), c=rng.normal(size=(1, H)))
    w = T(rng.normal(size=(1, H)))

    def f(p):
        h, c = L.lstm_cell_step(p["x"], p["h"], p["c"], p)
        return tn.add(tn.sum_all(tn.mul(h, w)), tn.sum_all(tn.mul(c, c)))

    err = tn.grad_check(f, params)
    assert max(err.values()) <= 1e-5


def test_relative_error_definition():
    assert tn.relative_error(0.0, 0.0) == 0.0
    assert tn.relative_error(1.0, 3.0) == pytest.approx(0.5)
    assert tn.relative_error(1e-9, 0.0) == pytest.approx(1e-9 / 1e-8)


# --- checkpoint container ---------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    arrays = {"scalar": np.array(3.25), "vec": rng.normal(size=5), "mat": rng.normal(size=(3, 4)),
              "cube": rng.normal(size=(2, 3, 4)), "empty": np.zeros((0, 3)), "ünï": np.array([-0.0, 1e-310])}
    path = tmp_path / "x.reseb"
    checkpoint.save(path, arrays)
    back = checkpoint.load(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        assert back[k].tobytes() == np.asarray(arrays[k], dtype="<f8").tobytes()
    assert path.read_bytes()[:6] == b"RESEB1"


def test_checkpoint_layout_by_hand():
    blob = checkpoint.encode({"ab": np.array([[1.0, 2.0]])})
    expected = (b"RESEB1" + (2).to_bytes(8, "little") + b"ab" + (2).to_bytes(8, "little")
                + (1).to_bytes(8, "little") + (2).to_bytes(8, "little")
                + np.array([1.0, 2.0], dtype="<f8").tobytes())
    assert blob == expected


def test_checkpoint_errors():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(b"NOTRES" + b"\0" * 8)
    blob = checkpoint.encode({"w": np.ones(4)})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(blob[:-3])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.encode({"w": np.ones((1, 1, 1, 1))})
