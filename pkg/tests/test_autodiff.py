import math

import numpy as np
import pytest

import oracles
from fedload import autodiff as ad
from fedload.params import ParamSet, ShapeError
from gradcheck import TOL, check, weighted_total

SEEDS = range(20)


def _lstm_params(rng, n_in, hidden, batch=()):
    return {
        "x": rng.normal(size=batch + (n_in,)),
        "h": rng.normal(size=batch + (hidden,)),
        "c": rng.normal(size=batch + (hidden,)),
        "w_ih": rng.normal(scale=0.7, size=(4 * hidden, n_in)),
        "w_hh": rng.normal(scale=0.7, size=(4 * hidden, hidden)),
        "b_ih": rng.normal(size=4 * hidden),
        "b_hh": rng.normal(size=4 * hidden),
    }


def _case(name, rng):
    """Return (fn, params) for one primitive, with random shapes and values."""
    n = lambda *s: rng.normal(size=s)
    if name == "add":
        p = {"a": n(3, 4), "b": n(4)}
        return lambda W: ad.add(W["a"], W["b"]), p
    if name == "sub":
        p = {"a": n(2, 3), "b": n(2, 3)}
        return lambda W: ad.sub(W["a"], W["b"]), p
    if name == "mul":
        p = {"a": n(2, 3, 4), "b": n(3, 1)}
        return lambda W: ad.mul(W["a"], W["b"]), p
    if name == "sigmoid":
        p = {"a": n(5, 3) * 2}
        return lambda W: ad.sigmoid(W["a"]), p
    if name == "tanh":
        p = {"a": n(5, 3) * 2}
        return lambda W: ad.tanh(W["a"]), p
    if name == "matmul":
        p = {"a": n(2, 3, 4), "b": n(2, 4, 5)}
        return lambda W: ad.matmul(W["a"], W["b"]), p
    if name == "transpose":
        p = {"a": n(2, 3, 4)}
        return lambda W: ad.transpose(W["a"]), p
    if name == "affine":
        p = {"x": n(2, 3, 4), "w": n(5, 4), "b": n(5)}
        return lambda W: ad.affine(W["x"], W["w"], W["b"]), p
    if name == "dot":
        p = {"a": n(3, 4), "b": n(3, 4)}
        return lambda W: ad.dot(W["a"], W["b"]), p
    if name == "concat":
        p = {"a": n(2, 3), "b": n(2, 2)}
        return lambda W: ad.concat([W["a"], W["b"]]), p
    if name == "stack":
        p = {"a": n(2, 3), "b": n(2, 3)}
        return lambda W: ad.stack([W["a"], W["b"]], axis=1), p
    if name == "sparsemax":
        p = {"z": n(3, 5)}
        return lambda W: ad.sparsemax(W["z"]), p
    if name == "lstm_cell":
        p = _lstm_params(rng, 3, 4, batch=(2,))

        def fn(W):
            h, c = ad.lstm_cell(W["x"], W["h"], W["c"], W["w_ih"], W["w_hh"], W["b_ih"], W["b_hh"])
            return ad.concat([h, c])
        return fn, p
    if name in ("lstm_layer_fwd", "lstm_layer_bwd"):
        p = _lstm_params(rng, 3, 4, batch=(2,))
        p["x"] = n(2, 5, 3)

        def fn(W):
            seq, h, c = ad.lstm_layer(W["x"], W["h"], W["c"], W["w_ih"], W["w_hh"], W["b_ih"],
                                      W["b_hh"], reverse=name.endswith("bwd"))
            return ad.add(weighted_total(ad.concat([h, c]), w_state), weighted_total(seq, w_seq))
        w_state, w_seq = n(2, 8), n(2, 5, 4)
        return fn, p
    raise KeyError(name)


PRIMITIVES = ["add", "sub", "mul", "sigmoid", "tanh", "matmul", "transpose", "affine", "dot",
              "concat", "stack", "sparsemax", "lstm_cell", "lstm_layer_fwd", "lstm_layer_bwd"]


def primitive_worst_error(name, seed):
    rng = np.random.default_rng(seed)
    fn, p = _case(name, rng)
    weights = {}

    def scalar(W):
        out = fn(W)
        if "w" not in weights:
            weights["w"] = rng.normal(size=out.data.shape)
        return weighted_total(out, weights["w"])

    return check(scalar, ParamSet(p))


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_gradients_match_finite_differences(name):
    worst = max(primitive_worst_error(name, s) for s in SEEDS)
    assert worst < TOL, f"{name}: max relative error {worst:.3g}"


def test_l1_loss_gradient_away_from_kinks():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        p = {"pred": rng.normal(size=(3, 4))}
        target = p["pred"] + rng.choice([-1.0, 1.0], size=(3, 4)) * rng.uniform(0.1, 1.0, size=(3, 4))
        assert check(lambda W: ad.l1_loss(W["pred"], target), ParamSet(p)) < TOL


# -- closed-form and frozen values ------------------------------------------------

def test_linear_case():
    tape = ad.Tape()
    W = tape.watch(ParamSet({"theta": [3.0]}))
    g = ad.backward(ad.dot(W["theta"], ad.constant([2.0])))
    assert g["theta"].tolist() == [2.0]


def test_loss_constant_in_parameter_has_zero_gradient():
    tape = ad.Tape()
    W = tape.watch(ParamSet({"theta": [3.0, 1.0], "other": [1.0]}))
    loss = ad.dot(W["other"], ad.constant([5.0]))
    g = ad.backward(loss)
    assert g["theta"].tolist() == [0.0, 0.0]


def test_backward_rejects_non_scalar_and_untaped():
    tape = ad.Tape()
    W = tape.watch(ParamSet({"a": [1.0, 2.0]}))
    with pytest.raises(ValueError):
        ad.backward(ad.tanh(W["a"]))
    with pytest.raises(ValueError):
        ad.backward(ad.constant(1.0))


def test_watch_twice_is_an_error():
    tape = ad.Tape()
    tape.watch(ParamSet({"a": [1.0]}))
    with pytest.raises(ValueError):
        tape.watch(ParamSet({"a": [1.0]}))


def test_l1_loss_values():
    assert ad.l1_loss(ad.constant([1.0, 2.0]), [1.0, 2.0]).item() == 0.0
    assert ad.l1_loss(ad.constant([1.0, 2.0]), [0.0, 0.0]).item() == 1.5
    rng = np.random.default_rng(7)
    pred, target = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    # frozen from oracles.mae over the same draw
    assert ad.l1_loss(ad.constant(pred), target).item() == pytest.approx(1.063058008060993, abs=1e-12)
    with pytest.raises(ShapeError):
        ad.l1_loss(ad.constant([1.0]), [1.0, 2.0])


def test_lstm_zero_weights_with_unit_cell():
    z = np.zeros
    h, c, _ = ad.lstm_cell_forward(z(1), z(1), np.ones(1), z((4, 1)), z((4, 1)), z(4), z(4))
    assert c.tolist() == [0.5]
    assert h[0] == pytest.approx(0.5 * math.tanh(0.5), abs=1e-15)
    assert h[0] == pytest.approx(0.23105857863000487, abs=1e-15)


def test_lstm_all_zero_inputs_give_zero_state():
    z = np.zeros
    h, c, _ = ad.lstm_cell_forward(z(2), z(3), z(3), np.ones((12, 2)), np.ones((12, 3)), z(12), z(12))
    assert not h.any() and not c.any()


def test_lstm_seed42_matches_scalar_oracle():
    rng = np.random.default_rng(42)
    H = 3
    w_ih = rng.uniform(-0.5, 0.5, (4 * H, 2))
    w_hh = rng.uniform(-0.5, 0.5, (4 * H, H))
    b_ih = rng.uniform(-0.5, 0.5, 4 * H)
    b_hh = rng.uniform(-0.5, 0.5, 4 * H)
    h0 = rng.uniform(-0.5, 0.5, H)
    c0 = rng.uniform(-0.5, 0.5, H)
    h, c, _ = ad.lstm_cell_forward(np.array([0.1, 0.2]), h0, c0, w_ih, w_hh, b_ih, b_hh)
    # frozen from oracles.lstm_step
    np.testing.assert_allclose(h, [0.06827431084214898, -0.10380317306808383, -0.05426557421155344],
                               rtol=0, atol=1e-14)
    np.testing.assert_allclose(c, [0.13359620554403476, -0.23438663745880978, -0.12598985032760945],
                               rtol=0, atol=1e-14)
    oh, oc = oracles.lstm_step([0.1, 0.2], h0.tolist(), c0.tolist(), w_ih.tolist(), w_hh.tolist(),
                               b_ih.tolist(), b_hh.tolist())
    np.testing.assert_allclose(h, oh, atol=1e-14)
    np.testing.assert_allclose(c, oc, atol=1e-14)


@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_layer_equals_chained_cells(reverse):
    rng = np.random.default_rng(3)
    p = _lstm_params(rng, 3, 4, batch=(2,))
    xs = rng.normal(size=(2, 6, 3))
    w = [ad.Tensor(p[k]) for k in ("w_ih", "w_hh", "b_ih", "b_hh")]
    seq, h_last, c_last = ad.lstm_layer(ad.Tensor(xs), ad.Tensor(p["h"]), ad.Tensor(p["c"]), *w,
                                        reverse=reverse)
    h, c = p["h"], p["c"]
    order = range(5, -1, -1) if reverse else range(6)
    for t in order:
        h, c, _ = ad.lstm_cell_forward(xs[:, t], h, c, p["w_ih"], p["w_hh"], p["b_ih"], p["b_hh"])
        np.testing.assert_allclose(seq.data[:, t], h, atol=1e-15)
    np.testing.assert_allclose(h_last.data, h, atol=1e-15)
    np.testing.assert_allclose(c_last.data, c, atol=1e-15)


def test_lstm_shape_errors_name_the_parameters():
    p = _lstm_params(np.random.default_rng(0), 3, 4)
    with pytest.raises(ShapeError, match="enc.w_ih"):
        ad.lstm_cell(ad.Tensor(np.zeros(2)), ad.Tensor(p["h"]), ad.Tensor(p["c"]),
                     ad.Tensor(p["w_ih"], name="enc.w_ih"), ad.Tensor(p["w_hh"]),
                     ad.Tensor(p["b_ih"]), ad.Tensor(p["b_hh"]))
    with pytest.raises(ShapeError):
        ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((4, 2))))


def test_non_finite_gradient_is_reported():
    tape = ad.Tape()
    W = tape.watch(ParamSet({"a": [1e308]}))
    with np.errstate(over="ignore"):
        loss = ad.l1_loss(ad.mul(W["a"], W["a"]), [0.0])
        with pytest.raises(FloatingPointError):
            ad.backward(loss)


def test_untaped_forward_records_nothing():
    out = ad.tanh(ad.constant([1.0]))
    assert out.tape is None
