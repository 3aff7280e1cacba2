import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adapthalt.adaptive import (
    AccumulatorState,
    HaltingTrace,
    accumulate,
    accumulate_sequence,
    bound_runner_up,
    bound_top,
    composite_loss,
    composite_loss_node,
    halt_mask,
    implicit_weights,
    ponder_cost,
    run_inference,
    run_training_forward,
    should_halt,
    top_two,
    update_p,
)
from adapthalt.autodiff import Graph, finite_diff_gradient, relative_error
from adapthalt.cells import GRUCell, init_params

unit = st.floats(0.0, 1.0)


def simplex_from(raw):
    e = np.asarray(raw, dtype=np.float64) + 1e-3
    return e / e.sum()


# -- scalar operations -------------------------------------------------------


def test_update_p_examples():
    assert update_p(1.0, 0.5) == 0.5
    assert update_p(0.5, 0.0) == 0.0
    assert abs(update_p(0.3, 0.4) - 0.12) < 1e-15


def test_update_p_rejects_out_of_range():
    with pytest.raises(ValueError):
        update_p(1.1, 0.5)
    with pytest.raises(ValueError):
        update_p(0.5, -0.01)
    update_p(1.0 + 1e-13, 0.5)  # within slack


def test_accumulate_examples():
    a1 = accumulate(AccumulatorState.initial(2), [0.2, 0.8])
    np.testing.assert_array_equal(a1.a, [0.2, 0.8])
    assert a1.n == 1
    frozen = accumulate(AccumulatorState(np.array([0.3, 0.7]), 0.0, 2), [1.0, 0.0])
    np.testing.assert_array_equal(frozen.a, [0.3, 0.7])
    mixed = accumulate(AccumulatorState(np.array([0.5, 0.5]), 0.5, 1), [1.0, 0.0])
    np.testing.assert_allclose(mixed.a, [0.75, 0.25], atol=1e-15)


def test_accumulate_rejects_bad_inputs():
    with pytest.raises(ValueError):
        accumulate(AccumulatorState.initial(2), [0.2, 0.3, 0.5])
    with pytest.raises(ValueError):
        accumulate(AccumulatorState.initial(2), [0.2, 0.3])


def test_implicit_weights_examples():
    np.testing.assert_array_equal(implicit_weights(HaltingTrace.from_h([0.4]), 1), [1.0])
    np.testing.assert_array_equal(implicit_weights(HaltingTrace.from_h([1.0, 1.0]), 3), [0, 0, 1])
    np.testing.assert_array_equal(implicit_weights(HaltingTrace.from_h([0.0, 0.6]), 2), [1, 0])
    np.testing.assert_array_equal(implicit_weights(HaltingTrace.from_h([1, 1, 1, 1]), 4), [0, 0, 0, 1])
    np.testing.assert_array_equal(implicit_weights(HaltingTrace.from_h([0, 0, 0]), 3), [1, 0, 0])


def test_implicit_weights_rejects_empty_trace():
    with pytest.raises(ValueError):
        implicit_weights(HaltingTrace((), ()), 1)
    with pytest.raises(ValueError):
        implicit_weights(HaltingTrace.from_h([0.5]), 4)


def test_ponder_cost_examples():
    assert ponder_cost(HaltingTrace.from_h([1, 1, 1]), 3) == 3.0
    assert ponder_cost(HaltingTrace.from_h([0, 0.7, 0.2]), 3) == 0.0
    assert ponder_cost(HaltingTrace.from_h([0.5, 0.5]), 2) == 0.75


def test_composite_loss_examples():
    assert composite_loss(0.7, 2.0, 0) == 0.7
    assert composite_loss(0.7, 0, 0.01) == 0.7
    assert abs(composite_loss(0.7, 2.0, 1e-3) - 0.702) < 1e-15
    with pytest.raises(ValueError):
        composite_loss(0.7, 1.0, -1e-3)


def test_bound_examples():
    assert bound_top(0.9, 0, 5) == 0.9
    assert bound_top(0.9, 0.3, 0) == 0.9
    assert abs(bound_top(0.9, 0.1, 2) - 0.729) < 1e-15
    assert bound_runner_up(0.05, 0, 7) == 0.05
    assert bound_runner_up(0.05, 0.3, 0) == 0.05
    assert abs(bound_runner_up(0.05, 0.1, 2) - 0.25) < 1e-15


def test_should_halt_examples():
    acc = AccumulatorState(np.array([0.6, 0.4]), 0.0, 3)
    assert should_halt(acc, 0.0, 6).halt
    acc = AccumulatorState(np.array([0.99, 0.01]), 1.0, 1)
    assert not should_halt(acc, 1.0, 1).halt
    acc = AccumulatorState(np.array([0.9, 0.05, 0.05]), 0.01, 2)
    d = should_halt(acc, 0.01, 3)
    assert d.halt and d.top_class == 0 and d.runner_up == 1
    assert abs(d.lower_bound - 0.9 * 0.99**3) < 1e-15
    assert abs(d.upper_bound - 0.08) < 1e-15


def test_should_halt_ties_and_errors():
    tied = AccumulatorState(np.array([0.5, 0.5]), 0.0, 1)
    d = should_halt(tied, 0.0, 3)
    assert d.top_class == 0 and d.runner_up == 1 and not d.halt
    assert top_two(np.array([0.2, 0.4, 0.4])) == (1, 2)
    with pytest.raises(ValueError):
        should_halt(AccumulatorState(np.array([1.0]), 0.0, 1), 0.0, 1)
    with pytest.raises(ValueError):
        should_halt(AccumulatorState.initial(2), 1.0, 1)


def test_halt_mask_matches_scalar_rule():
    rng = np.random.default_rng(0)
    a = rng.dirichlet(np.ones(3), size=500)
    a[:20, 1] = a[:20, 0]  # exact ties
    p = rng.uniform(0, 0.2, size=500) ** 2
    p[:10] = 0.0
    for d in (0, 1, 4):
        mask = halt_mask(a, p, d)
        ref = [should_halt(AccumulatorState(a[i], p[i], 1), p[i], d).halt for i in range(500)]
        np.testing.assert_array_equal(mask, ref)


# -- properties ---------------------------------------------------------------


@settings(max_examples=300, deadline=None)
@given(st.lists(unit, min_size=1, max_size=12))
def test_chain_is_monotone_and_in_unit_interval(h):
    p = HaltingTrace.from_h(h).p
    assert all(0.0 <= x <= 1.0 for x in p)
    assert all(p[i] >= p[i + 1] for i in range(len(p) - 1))


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 12).flatmap(
    lambda n: st.tuples(st.lists(unit, min_size=n, max_size=n),
                        st.lists(st.lists(unit, min_size=3, max_size=3), min_size=n, max_size=n))))
def test_accumulator_is_the_implicit_mixture(case):
    h, raw = case
    ys = [simplex_from(r) for r in raw]
    N = len(h)
    a = accumulate_sequence(h, ys)
    for a_n in a:
        assert abs(a_n.sum() - 1.0) <= 1e-12
    beta = implicit_weights(HaltingTrace.from_h(h), N)
    assert np.all(beta >= 0)
    assert abs(beta.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(a[-1], beta @ np.stack(ys), rtol=0, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(unit, min_size=2, max_size=8),
       st.lists(st.lists(unit, min_size=3, max_size=3), min_size=8, max_size=8))
def test_halting_is_sound_against_adversarial_continuation(h, raw):
    N = 8
    h = (h * 8)[:N]
    ys = [simplex_from(r) for r in raw]
    acc = AccumulatorState.initial(3)
    for n in range(1, N):
        acc = accumulate(acc, ys[n - 1])
        acc.p_carry = update_p(acc.p_carry, h[n - 1])
        dec = should_halt(acc, acc.p_carry, N - n)
        if dec.halt:
            a, p = acc.a.copy(), acc.p_carry
            adv = np.eye(3)[dec.runner_up]
            for _ in range(N - n):
                a = adv * p + a * (1 - p)
            assert int(np.argmax(a)) == dec.top_class
            break


# -- graph-level passes -------------------------------------------------------


@pytest.fixture
def small_model():
    params = init_params(5, 6, 3, seed=4)
    rng = np.random.default_rng(1)
    for name in ("b_h", "b_y"):
        params.params[name] = rng.uniform(-1, 1, size=params[name].shape)
    return params, rng.uniform(-1, 1, size=5)


def test_training_forward_base_case(small_model):
    params, x = small_model
    fp = run_training_forward(GRUCell(params), x, 1)
    np.testing.assert_array_equal(fp.value(fp.Y), fp.value(fp.y[0]))
    assert fp.value(fp.rho)[0] == fp.value(fp.h[0])[0]


def test_training_forward_matches_implicit_weights(small_model):
    params, x = small_model
    fp = run_training_forward(GRUCell(params), x, 5)
    beta = implicit_weights(fp.trace(), 5)
    mix = beta @ np.stack(fp.intermediates)
    assert np.max(np.abs(fp.value(fp.Y) - mix)) <= 1e-12


def test_saturated_halting_head_freezes_first_answer(small_model):
    params, x = small_model
    params = params.copy()
    params.params["b_h"] = np.array([-60.0])
    fp = run_training_forward(GRUCell(params), x, 6)
    np.testing.assert_allclose(fp.value(fp.Y), fp.value(fp.y[0]), atol=1e-20)


def test_inference_without_halting_is_bit_identical(small_model):
    params, x = small_model
    fp = run_training_forward(GRUCell(params), x, 7)
    res = run_inference(GRUCell(params), x, 7, halting_enabled=False)
    assert res.steps_used == 7 and not res.halted_early
    assert res.Y.tobytes() == fp.value(fp.Y).tobytes()


def test_inference_single_step(small_model):
    params, x = small_model
    assert run_inference(GRUCell(params), x, 1).steps_used == 1


def test_halted_inference_keeps_full_run_argmax():
    rng = np.random.default_rng(5)
    halted = 0
    for seed in range(40):
        params = init_params(4, 5, 3, seed)
        params.params["b_h"] = np.array([rng.uniform(-6, 1)])
        params.params["b_y"] = rng.uniform(-3, 3, size=3)
        x = rng.uniform(-1, 1, size=4)
        full = run_inference(GRUCell(params), x, 10, halting_enabled=False)
        early = run_inference(GRUCell(params), x, 10)
        assert early.final_class == full.final_class
        halted += early.halted_early
    assert halted > 0


def test_composite_loss_gradient_wrt_halting_and_answers():
    """Differentiate through the accumulator with free ``h`` and ``y`` leaves."""
    rng = np.random.default_rng(11)
    N, C, tau = 4, 3, 0.05
    inputs = {f"y{n}": rng.uniform(-2, 2, C) for n in range(N)}
    inputs["h_logit"] = rng.uniform(-2, 2, N)

    def build(g, ids):
        p_prev = g.leaf(np.ones(1))
        a_prev = g.leaf(np.zeros(C))
        rho = None
        for n in range(N):
            y = g.softmax(ids[f"y{n}"])
            h = g.sigmoid(g.index_select(ids["h_logit"], [n]))
            a_prev = g.add(g.multiply(y, p_prev), g.multiply(a_prev, g.one_minus(p_prev)))
            p_prev = g.multiply(h, p_prev)
            rho = p_prev if rho is None else g.add(rho, p_prev)
        ce = g.scale(g.sum(g.log(g.index_select(a_prev, [1]))), -1.0)
        return g.add(ce, g.scale(g.sum(rho), tau))

    def f(vals):
        g = Graph()
        return float(g.value(build(g, {k: g.leaf(v) for k, v in vals.items()})))

    g = Graph()
    ids = {k: g.leaf(v) for k, v in inputs.items()}
    grads = g.backward(build(g, ids))
    ad = {k: grads[i] for k, i in ids.items()}
    fd = finite_diff_gradient(f, inputs, 1e-5)
    assert relative_error(ad, fd) < 1e-6
    assert np.all(ad["h_logit"] != 0)


def test_batched_loss_node_reduces_to_cross_entropy_at_zero_tau(small_model):
    params, _ = small_model
    x = np.random.default_rng(2).uniform(-1, 1, size=(6, 5))
    t = np.array([0, 1, 2, 0, 1, 2])
    g = Graph()
    fp = run_training_forward(GRUCell(params), x, 4, g)
    loss, task, mean_rho = composite_loss_node(g, fp, t, 0.0)
    assert loss == task
    Y = g.value(fp.Y)
    assert abs(g.value(loss) - (-np.mean(np.log(Y[np.arange(6), t])))) < 1e-12
    g2 = Graph()
    fp2 = run_training_forward(GRUCell(params), x, 4, g2)
    loss2, _, rho2 = composite_loss_node(g2, fp2, t, 0.5)
    assert abs(g2.value(loss2) - (g.value(loss) + 0.5 * g2.value(rho2))) < 1e-12
