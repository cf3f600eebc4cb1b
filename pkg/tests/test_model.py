import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lrtabl.model import (
    build_structure,
    compute_metrics,
    network_backward,
    network_forward,
    predict_class,
    structure_spec,
    total_param_count,
    weighted_entropy_loss,
)

from _oracles import brute_metrics, central_diff, rel_error


def test_build_structure_counts():
    assert total_param_count(build_structure("A").spec) == 234
    assert total_param_count(build_structure("C").spec) == 11344
    assert total_param_count(build_structure("C", "lowrank", 21).spec) == 7784
    assert total_param_count(build_structure("B", "lowrank", 1).spec) == 918


def test_structure_shapes():
    spec = structure_spec("C", "lowrank", 4)
    dims = [(s.kind.value, s.d_in, s.t_in, s.d_out, s.t_out, s.activation) for s in spec.layers]
    assert dims == [
        ("LRBL", 40, 10, 60, 10, "relu"),
        ("LRBL", 60, 10, 120, 5, "relu"),
        ("LRTABL", 120, 5, 3, 1, "identity"),
    ]


def test_structure_errors():
    with pytest.raises(ValueError):
        structure_spec("D")
    with pytest.raises(ValueError):
        structure_spec("A", "lowrank")
    with pytest.raises(ValueError):
        structure_spec("A", "full", 3)


@pytest.mark.parametrize("sid", ["A", "B", "C"])
def test_forward_probs_and_determinism(sid):
    net = build_structure(sid, "lowrank", 3, seed=1)
    x = np.random.default_rng(0).normal(size=(5, 40, 10)).astype(np.float32)
    probs, _ = network_forward(net, x)
    assert probs.shape == (5, 3)
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    again, _ = network_forward(net, x)
    assert probs.tobytes() == again.tobytes()


def test_zeroed_final_layer_gives_uniform_probs():
    net = build_structure("B", seed=2)
    for arr in net.params[-1].values():
        arr[...] = 0
    probs, _ = network_forward(net, np.random.default_rng(1).normal(size=(40, 10)).astype(np.float32))
    np.testing.assert_allclose(probs, [1 / 3] * 3, atol=1e-7)


def test_forward_rejects_wrong_shape():
    with pytest.raises(ValueError):
        network_forward(build_structure("A"), np.zeros((10, 40)))


@pytest.mark.parametrize("probs,expected", [([0.2, 0.5, 0.3], 1), ([0.4, 0.4, 0.2], 0), ([0, 0, 1], 2)])
def test_predict_class(probs, expected):
    assert predict_class(probs) == expected


def test_loss_examples():
    loss, _ = weighted_entropy_loss(np.array([[1.0, 0.0, 0.0]]), [0], [1, 1, 1])
    assert loss == 0.0
    loss, _ = weighted_entropy_loss(np.full((1, 3), 1 / 3), [0], [1, 1, 1], 1e6)
    assert loss == pytest.approx(1e6 * np.log(3), rel=1e-12)
    assert loss == pytest.approx(1.0986e6, rel=1e-4)


def test_loss_halves_when_counts_double():
    rng = np.random.default_rng(3)
    probs = rng.dirichlet(np.ones(3), size=8)
    y = rng.integers(0, 3, size=8)
    a, _ = weighted_entropy_loss(probs, y, [5, 7, 9])
    b, _ = weighted_entropy_loss(probs, y, [10, 14, 18])
    assert b == pytest.approx(a / 2, rel=1e-12)


@given(st.lists(st.tuples(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0), st.floats(1e-6, 1.0), st.integers(0, 2)),
                min_size=1, max_size=6))
def test_loss_positive_unless_perfect(rows):
    probs = np.array([r[:3] for r in rows])
    probs /= probs.sum(axis=1, keepdims=True)
    y = np.array([r[3] for r in rows])
    loss, _ = weighted_entropy_loss(probs, y, [3, 2, 4])
    if np.any(probs[np.arange(len(y)), y] < 1):
        assert loss > 0


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    probs = rng.dirichlet(np.ones(3), size=4)
    y = np.array([0, 2, 1, 2])
    _, d = weighted_entropy_loss(probs, y, [2, 3, 5])
    num = central_diff(lambda: weighted_entropy_loss(probs, y, [2, 3, 5])[0], probs, step=1e-7)
    assert rel_error(d, num) < 1e-6


def test_loss_clips_zero_probability():
    loss, d = weighted_entropy_loss(np.array([[0.0, 1.0, 0.0]]), [0], [1, 1, 1], 1.0)
    assert loss == pytest.approx(-np.log(1e-12))
    assert np.all(np.isfinite(d))


def test_loss_errors():
    with pytest.raises(ValueError):
        weighted_entropy_loss(np.zeros((0, 3)), [], [1, 1, 1])
    with pytest.raises(ValueError):
        weighted_entropy_loss(np.full((1, 3), 1 / 3), [3], [1, 1, 1])
    with pytest.raises(ValueError):
        weighted_entropy_loss(np.full((1, 3), 1 / 3), [0], [0, 1, 1])


def test_metrics_perfect():
    m = compute_metrics([0, 1, 2, 1], [0, 1, 2, 1])
    assert m.accuracy == 1.0 and m.macro_f1 == 1.0


def test_metrics_hand_example():
    m = compute_metrics([0, 1, 1, 2], [0, 0, 1, 2])
    assert m.accuracy == 0.75
    np.testing.assert_allclose(m.precision, [1.0, 0.5, 1.0])
    np.testing.assert_allclose(m.recall, [0.5, 1.0, 1.0])
    np.testing.assert_allclose(m.f1, [2 / 3, 2 / 3, 1.0])
    assert m.macro_f1 == pytest.approx(7 / 9)
    assert m.confusion.sum() == 4
    assert m.confusion.tolist() == [[1, 1, 0], [0, 1, 0], [0, 0, 1]]


def test_metrics_absent_class_counts_zero():
    m = compute_metrics([0, 0, 1], [0, 0, 1])
    assert m.f1[2] == 0.0
    assert m.macro_f1 == pytest.approx(2 / 3)


def test_metrics_match_counting_oracle():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        truths = rng.integers(0, 3, size=n)
        preds = rng.integers(0, 3, size=n)
        m = compute_metrics(preds, truths)
        acc, ps, rs, fs = brute_metrics(preds.tolist(), truths.tolist())
        assert m.accuracy == pytest.approx(acc)
        np.testing.assert_allclose(m.precision, ps)
        np.testing.assert_allclose(m.recall, rs)
        np.testing.assert_allclose(m.f1, fs)
        assert m.macro_f1 == pytest.approx(np.mean(fs))


def test_metrics_merge_adds_confusions():
    a = compute_metrics([0, 1], [0, 2])
    b = compute_metrics([2, 2], [2, 1])
    merged = a.merge(b)
    assert merged.n_samples == 4
    assert merged.confusion.tolist() == compute_metrics([0, 1, 2, 2], [0, 2, 2, 1]).confusion.tolist()


def test_metrics_errors():
    with pytest.raises(ValueError):
        compute_metrics([], [])
    with pytest.raises(ValueError):
        compute_metrics([0, 3], [0, 1])


def network_gradcheck(net, rng):
    x = rng.normal(size=(3, 40, 10))
    y = np.array([0, 2, 1])
    counts = [4, 9, 5]

    def loss():
        return weighted_entropy_loss(network_forward(net, x)[0], y, counts)[0]

    probs, caches = network_forward(net, x)
    _, dprobs = weighted_entropy_loss(probs, y, counts)
    _, grads = network_backward(net, caches, probs, dprobs)
    errors = {}
    for i, p in enumerate(net.params):
        for name, arr in p.items():
            num = central_diff(loss, arr)
            if name == "W":
                np.fill_diagonal(num, 0.0)
            errors[f"{i}.{name}"] = rel_error(grads[i][name], num)
    return errors


@pytest.mark.parametrize("variant,rank", [("full", None), ("lowrank", 2)])
def test_structure_a_gradient(variant, rank):
    rng = np.random.default_rng(6)
    net = build_structure("A", variant, rank, seed=3, dtype=np.float64)
    net.params[0]["lam"][...] = 0.7
    errors = network_gradcheck(net, rng)
    assert max(errors.values()) < 1e-4, errors


def test_network_spec_roundtrip_and_digest():
    spec = structure_spec("C", "lowrank", 5)
    again = type(spec).from_dict(spec.to_dict())
    assert again == spec
    assert again.digest() == spec.digest()
    assert structure_spec("C", "lowrank", 6).digest() != spec.digest()
