import numpy as np
import pytest

from twoscale.errors import DataError, DomainError, UsageError
from twoscale.segment import (
    Segment,
    constant_segment,
    exact_steps,
    lipschitz_modulus,
    segment_from_dict,
    segment_from_function,
    segment_to_dict,
    shift_append,
    sup_norm,
    value_at,
)


def test_exact_steps_accepts_clean_ratios():
    assert exact_steps(1.0, 0.125) == 8
    assert exact_steps(0.5, 0.005) == 100
    # Accumulated float error within 1e-9 relative still snaps.
    h = 0.1
    span = sum([h] * 7)
    assert exact_steps(span, h) == 7


def test_exact_steps_rejects_misaligned_and_bad_inputs():
    with pytest.raises(DomainError):
        exact_steps(1.0, 0.3)
    with pytest.raises(DomainError):
        exact_steps(1.0, -0.1)
    with pytest.raises(DomainError):
        exact_steps(0.0, 0.1)
    with pytest.raises(DomainError):
        exact_steps(0.05, 0.1)  # ratio below 1


def test_segment_shape_validation():
    with pytest.raises(DataError):
        Segment(1.0, 0.5, np.zeros(4))  # needs 3 rows for tau/h = 2
    with pytest.raises(DataError):
        Segment(1.0, 0.5, np.zeros((3, 2, 2)))
    bad = np.zeros(3)
    bad[1] = np.nan
    with pytest.raises(DataError):
        Segment(1.0, 0.5, bad)


def test_segment_is_immutable():
    seg = constant_segment(1.0, 0.25, 2.0)
    with pytest.raises(ValueError):
        seg.values[0, 0] = 9.0


def test_sup_norm_hand_values():
    # Scalar window: plain max of |values|.
    seg = Segment(1.0, 0.5, np.array([-1.0, 2.0, -3.0]))
    assert sup_norm(seg) == 3.0
    # Vector window: Euclidean row norms, so (3, 4) scores 5.
    vals = np.array([[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]])
    assert sup_norm(Segment(1.0, 0.5, vals)) == 5.0


def test_sup_norm_axioms_randomized():
    """Seminorm checks on random windows: positivity, homogeneity, triangle."""
    rng = np.random.default_rng(20240817)
    tau, h = 1.0, 0.125
    steps = exact_steps(tau, h)
    for trial in range(200):
        n = int(rng.integers(1, 4))
        a = rng.standard_normal((steps + 1, n))
        b = rng.standard_normal((steps + 1, n))
        c = float(rng.uniform(-3.0, 3.0))
        sa = Segment(tau, h, a)
        sb = Segment(tau, h, b)
        assert sup_norm(sa) >= 0.0
        assert np.isclose(sup_norm(Segment(tau, h, c * a)), abs(c) * sup_norm(sa))
        lhs = sup_norm(Segment(tau, h, a + b))
        assert lhs <= sup_norm(sa) + sup_norm(sb) + 1e-12
    zero = constant_segment(tau, h, np.zeros(2))
    assert sup_norm(zero) == 0.0


def test_value_at_grid_nodes_bit_exact():
    rng = np.random.default_rng(7)
    tau, h = 2.0, 0.25
    steps = exact_steps(tau, h)
    vals = rng.standard_normal((steps + 1, 3))
    seg = Segment(tau, h, vals)
    for i in range(steps + 1):
        theta = -tau + i * h
        out = value_at(seg, theta)
        assert np.array_equal(out, vals[i])
    # Endpoint aliases.
    assert np.array_equal(seg.at(0.0), vals[-1])
    assert np.array_equal(seg.at(-tau), vals[0])


def test_value_at_interpolates_between_nodes():
    seg = segment_from_function(1.0, 0.5, lambda th: th)
    # Halfway between nodes -1.0 and -0.5.
    assert np.isclose(value_at(seg, -0.75)[0], -0.75)
    mid = value_at(seg, -0.1)
    assert np.isclose(mid[0], -0.1)


def test_value_at_rejects_out_of_window():
    seg = constant_segment(1.0, 0.25, 1.0)
    with pytest.raises(DomainError):
        value_at(seg, 0.1)
    with pytest.raises(DomainError):
        value_at(seg, -1.3)
    # Tiny float overshoot from t - tau arithmetic is clamped, not fatal.
    assert value_at(seg, 1e-9)[0] == 1.0


def test_shift_append_matches_manual_roll():
    rng = np.random.default_rng(99)
    tau, h = 1.0, 0.2
    steps = exact_steps(tau, h)
    vals = rng.standard_normal((steps + 1, 2))
    seg = Segment(tau, h, vals)
    history = [vals[i].copy() for i in range(steps + 1)]
    for k in range(25):
        new = rng.standard_normal(2)
        seg = shift_append(seg, new)
        history.append(new)
        expect = np.stack(history[-(steps + 1):])
        assert np.array_equal(seg.values, expect)


def test_shift_append_validates_new_value():
    seg = constant_segment(1.0, 0.5, np.zeros(2))
    with pytest.raises(DataError):
        shift_append(seg, np.zeros(3))
    with pytest.raises(DataError):
        shift_append(seg, np.array([1.0, np.inf]))
    # Scalar windows accept plain floats.
    s1 = constant_segment(1.0, 0.5, 0.0)
    out = shift_append(s1, 4.0)
    assert out.values[-1, 0] == 4.0


def test_lipschitz_modulus_of_linear_ramp():
    # theta -> 2 theta has per-step slope exactly 2 everywhere.
    seg = segment_from_function(1.0, 0.125, lambda th: 2.0 * th)
    assert np.isclose(lipschitz_modulus(seg), 2.0)
    flat = constant_segment(1.0, 0.125, 5.0)
    assert lipschitz_modulus(flat) == 0.0


def test_lipschitz_modulus_picks_worst_step():
    vals = np.array([0.0, 0.0, 1.0, 1.0, 1.0])
    seg = Segment(1.0, 0.25, vals)
    assert np.isclose(lipschitz_modulus(seg), 4.0)


def test_constant_segment_dimensions():
    seg = constant_segment(1.0, 0.25, np.array([1.0, -2.0]), n=2)
    assert seg.n == 2
    assert seg.grid_steps == 4
    assert sup_norm(seg) == pytest.approx(np.sqrt(5.0))
    with pytest.raises(UsageError):
        constant_segment(1.0, 0.25, np.array([1.0]), n=2)


def test_dict_round_trip_preserves_bits():
    rng = np.random.default_rng(4242)
    seg = Segment(1.5, 0.25, rng.standard_normal((7, 2)))
    data = segment_to_dict(seg)
    back = segment_from_dict(data)
    assert back.tau == seg.tau
    assert back.h == seg.h
    assert np.array_equal(back.values, seg.values)


def test_dict_round_trip_survives_json():
    import json

    seg = segment_from_function(1.0, 0.5, lambda th: np.array([th, th * th]))
    text = json.dumps(segment_to_dict(seg))
    back = segment_from_dict(json.loads(text))
    assert np.array_equal(back.values, seg.values)


def test_segment_from_dict_rejects_bad_payloads():
    with pytest.raises(DataError):
        segment_from_dict({"tau": 1.0, "h": 0.5})
    with pytest.raises(DataError):
        segment_from_dict({"tau": 1.0, "h": 0.5, "values": "nope"})
    good = segment_to_dict(constant_segment(1.0, 0.5, 1.0))
    good["n"] = 7
    with pytest.raises(DataError):
        segment_from_dict(good)
