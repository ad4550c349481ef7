import math

import numpy as np
import pytest

from graybo.core import History, Observation, encode, sample_pipeline
from graybo.costmodel import (
    STEP_COST_FLOOR,
    CostPredictor,
    FidelityExhaustedError,
    fit_on_history,
    next_step_cost,
)
from graybo.neural import fd_noise_floor, grad_check
from graybo.rng import substream
from graybo.surrogate import PredictorContext, history_inputs

N_EPOCHS = 10


@pytest.fixture()
def ctx(small_space, meta_features):
    return PredictorContext.from_space(small_space, meta_features, N_EPOCHS, 1)


def _encodings(space, rng, n):
    return {pid: encode(sample_pipeline(space, rng), space) for pid in range(n)}


def test_predictions_nonnegative_and_deterministic(ctx, small_space):
    rng = substream(0, "cm")
    encs = _encodings(small_space, rng, 3)
    h = History()
    for pid in range(3):
        h.append(Observation(pid, 1, 0.5, float(pid + 1)))
    inputs, _, _ = history_inputs(h, encs, ctx)
    cp = CostPredictor(ctx, substream(1, "cp"))
    first = cp.predict_batch(inputs)
    second = cp.predict_batch(inputs)
    assert np.array_equal(first, second)
    assert np.all(first >= 0.0)


def test_fit_learns_linear_cost_table(ctx, small_space):
    # exact cost 2t per epoch; train on epochs 1..8, hold out 9..10
    rng = substream(2, "lin")
    encs = _encodings(small_space, rng, 6)
    h = History()
    for pid in range(6):
        for ep in range(1, 9):
            h.append(Observation(pid, ep, 0.5, 2.0 * ep))
    inputs, _, costs = history_inputs(h, encs, ctx)
    cp = CostPredictor(ctx, substream(3, "cp"))
    cp.fit(inputs, costs, steps=3000, lr=1e-2)
    held = History()
    for pid in range(6):
        for ep in range(1, 11):
            held.append(Observation(pid, ep, 0.5, 2.0 * ep))
    held_inputs, _, held_costs = history_inputs(held, encs, ctx)
    sel = [i for i, o in enumerate(held.observations) if o.epoch > 8]
    pred = cp.predict_batch(held_inputs)[sel]
    truth = held_costs[sel]
    rel_err = np.abs(pred - truth) / truth
    assert np.median(rel_err) <= 0.20


def test_fit_empty_history_is_noop(ctx):
    cp = CostPredictor(ctx, substream(4, "cp"))
    before = [p.values.copy() for p in cp.params()]
    report = fit_on_history(cp, History(), {}, ctx)
    assert report.steps == 0
    for p, b in zip(cp.params(), before):
        assert np.array_equal(p.values, b)


def test_fit_never_increases_loss(ctx, small_space):
    for seed in range(20):
        rng = substream(seed, "const")
        encs = _encodings(small_space, rng, 3)
        h = History()
        for pid in range(3):
            for ep in range(1, 4):
                h.append(Observation(pid, ep, 0.5, 7.5 * ep))
        inputs, _, costs = history_inputs(h, encs, ctx)
        cp = CostPredictor(ctx, substream(seed, "cpc"))
        report = cp.fit(inputs, costs, steps=25, lr=1e-3)
        assert report.final_mse <= report.initial_mse + 1e-12


def test_zero_cost_history_drives_raw_toward_zero(ctx, small_space):
    rng = substream(5, "zero")
    encs = _encodings(small_space, rng, 3)
    h = History()
    for pid in range(3):
        for ep in range(1, 4):
            h.append(Observation(pid, ep, 0.5, 0.0))
    inputs, _, costs = history_inputs(h, encs, ctx)
    cp = CostPredictor(ctx, substream(6, "cp"))
    before = np.abs(cp.raw_batch(inputs)).mean()
    cp.fit(inputs, costs, steps=500, lr=1e-2)
    after = np.abs(cp.raw_batch(inputs)).mean()
    assert after < before


def test_gradients_match_finite_differences(ctx, small_space):
    rng = substream(7, "grad")
    encs = _encodings(small_space, rng, 4)
    h = History()
    for pid in range(4):
        cost = 0.0
        for ep in range(1, 4):
            cost += float(rng.uniform(1, 6))
            h.append(Observation(pid, ep, float(rng.uniform(0.1, 0.9)), cost))
    inputs, _, costs = history_inputs(h, encs, ctx)
    cp = CostPredictor(ctx, substream(8, "cp"))

    def loss_fn():
        return cp.mse(inputs, costs)

    def grad_fn():
        for p in cp.params():
            p.zero_grad()
        cp.mse_with_grads(inputs, costs)

    floor = fd_noise_floor(loss_fn())
    assert grad_check(cp.params(), loss_fn, grad_fn, noise_floor=floor) <= 1e-4


# ---------------------------------------------------------------------------
# next_step_cost


class _FixedCost(CostPredictor):
    """Cost predictor returning a constant, for denominator arithmetic tests."""

    def __init__(self, ctx, value):
        super().__init__(ctx, substream(99, "fixed"))
        self._value = value

    def predict_batch(self, inputs):
        return np.full(len(inputs), self._value)


def test_next_step_cost_unobserved_pipeline(ctx, small_space):
    encs = _encodings(small_space, substream(9, "nc"), 1)
    cp = _FixedCost(ctx, 12.5)
    assert next_step_cost(cp, 0, History(), encs, ctx) == pytest.approx(12.5)


def test_next_step_cost_subtracts_observed(ctx, small_space):
    encs = _encodings(small_space, substream(10, "nc"), 1)
    h = History()
    h.append(Observation(0, 1, 0.5, 27.0))
    cp = _FixedCost(ctx, 30.0)
    assert next_step_cost(cp, 0, h, encs, ctx) == pytest.approx(3.0)


def test_next_step_cost_clamped_to_floor(ctx, small_space):
    encs = _encodings(small_space, substream(11, "nc"), 1)
    h = History()
    h.append(Observation(0, 1, 0.5, 27.0))
    cp = _FixedCost(ctx, 25.0)
    assert next_step_cost(cp, 0, h, encs, ctx) == STEP_COST_FLOOR


def test_next_step_cost_rejects_exhausted_pipeline(ctx, small_space):
    encs = _encodings(small_space, substream(12, "nc"), 1)
    h = History()
    for ep in range(1, N_EPOCHS + 1):
        h.append(Observation(0, ep, 0.5, float(ep)))
    cp = _FixedCost(ctx, 100.0)
    with pytest.raises(FidelityExhaustedError):
        next_step_cost(cp, 0, h, encs, ctx)


def test_next_step_cost_always_positive(ctx, small_space):
    rng = substream(13, "pos")
    encs = _encodings(small_space, rng, 5)
    h = History()
    for pid in range(5):
        cost = 0.0
        for ep in range(1, 5):
            cost += float(rng.uniform(0.0, 100.0))
            h.append(Observation(pid, ep, 0.5, cost))
    cp = CostPredictor(ctx, substream(14, "cp"))
    for pid in range(5):
        assert next_step_cost(cp, pid, h, encs, ctx) >= STEP_COST_FLOOR
