import inspect
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spikegest import tape as tp
from spikegest.signal import SynthSpec, synth_generate
from spikegest.snn import JasnnModel, forward_batch
from spikegest.ssfda import (Memory, MemoryEntry, SsfdaConfig, adapt, build_memory,
                             kl_to_uniform, memory_from_traces, pearson, plg_select,
                             snll_kl_loss, snll_kl_op, topk_indices, topk_neighbors)

# -(ln 0.8 + ln 0.6)/2 = 0.36698459, KL([0.7, 0.3] || uniform) = 0.08228288
WORKED_EXAMPLE = 0.224633733022576


def test_memory_from_traces_noise_free_and_size():
    traces = np.random.default_rng(0).normal(size=(7, 5, 3))
    mem = memory_from_traces(traces, np.arange(7), delta=0.0)
    assert len(mem) == 7
    np.testing.assert_array_equal(mem.vectors, traces.reshape(7, -1))
    np.testing.assert_array_equal(mem.cached_argmax, traces.sum(axis=1).argmax(axis=1))


def test_memory_noise_statistics():
    traces = np.zeros((10_000, 1, 1))
    mem = memory_from_traces(traces, np.arange(10_000), delta=0.1, seed=4)
    assert np.std(mem.vectors) == pytest.approx(0.1, rel=0.05)
    assert np.all(mem.cached_argmax == 0)


def test_memory_noise_keyed_by_sample_id():
    traces = np.random.default_rng(1).normal(size=(4, 3, 2))
    a = memory_from_traces(traces, [10, 11, 12, 13], 0.1, seed=1, epoch=2)
    b = memory_from_traces(traces[[2, 0]], [12, 10], 0.1, seed=1, epoch=2)
    np.testing.assert_array_equal(a.vectors[[2, 0]], b.vectors)
    c = memory_from_traces(traces, [10, 11, 12, 13], 0.1, seed=1, epoch=3)
    assert not np.array_equal(a.vectors, c.vectors)


def test_memory_entry_round_trip():
    mem = memory_from_traces(np.ones((3, 2, 2)), [5, 6, 7], delta=0.0)
    assert isinstance(mem[1], MemoryEntry) and mem[1].sample_id == 6
    again = Memory.from_entries(mem.entries())
    np.testing.assert_array_equal(again.vectors, mem.vectors)


def test_pearson_cases():
    x = np.array([1.0, 4.0, 2.0, 8.0])
    assert pearson(x, x) == pytest.approx(1.0, abs=1e-12)
    assert pearson(x, 3 * x + 7) == pytest.approx(1.0, abs=1e-12)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-12)
    assert pearson([1, 1, 1], [1, 2, 3]) == 0.0
    assert pearson(x, [4.0, 1.0, 0.0, 2.0]) == pytest.approx(np.corrcoef(x, [4, 1, 0, 2])[0, 1],
                                                              abs=1e-12)


@given(arrays(np.float64, 8, elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, 8, elements=st.floats(-1e3, 1e3)))
def test_pearson_range(a, b):
    assert -1.0 - 1e-12 <= pearson(a, b) <= 1.0 + 1e-12


def _toy_memory():
    q = np.array([0.0, 1.0, 2.0, 3.0, 5.0])
    rng = np.random.default_rng(0)
    rows = np.stack([q + rng.normal(0, 1.5, 5), q[::-1], q + rng.normal(0, 0.5, 5)])
    return q, Memory(rows, np.array([4, 1, 2]), np.array([100, 101, 102]))


def test_topk_matches_bruteforce_order():
    q, mem = _toy_memory()
    scores = [np.corrcoef(q, r)[0, 1] for r in mem.vectors]
    order = sorted(range(3), key=lambda i: -scores[i])
    np.testing.assert_array_equal(topk_indices(q, mem, 2), order[:2])
    np.testing.assert_array_equal(topk_indices(q, mem, 3), order)


def test_topk_hand_scores_order():
    # scores 0.9, -0.2, 0.5 against query e0 = [1, 0, ...] realised through exact vectors
    q = np.array([1.0, -1.0, 0.0, 0.0])

    def with_corr(r):
        # unit-norm zero-mean vector orthogonal to q
        ortho = np.array([0.0, 0.0, 1.0, -1.0]) / np.sqrt(2)
        return r * q / np.sqrt(2) + np.sqrt(1 - r * r) * ortho

    mem = Memory(np.stack([with_corr(r) for r in (0.9, -0.2, 0.5)]), np.zeros(3, int),
                 np.array([1, 2, 3]))
    assert pearson(q, mem.vectors[0]) == pytest.approx(0.9, abs=1e-12)
    assert [e.sample_id for e in topk_neighbors(q, mem, 2)] == [1, 3]


def test_topk_duplicate_and_ties():
    q, mem = _toy_memory()
    dup = Memory(np.vstack([mem.vectors, q]), np.array([4, 1, 2, 9]), np.array([100, 101, 102, 7]))
    assert topk_neighbors(q, dup, 1)[0].sample_id == 7
    tie = Memory(np.stack([q, q, q]), np.zeros(3, int), np.array([9, 3, 5]))
    assert [e.sample_id for e in topk_neighbors(q, tie, 3)] == [3, 5, 9]
    assert [e.sample_id for e in topk_neighbors(q, tie, 2, exclude_id=3)] == [5, 9]
    with pytest.raises(ValueError):
        topk_indices(q, tie, 4)


def test_topk_stable_under_low_scoring_insert():
    q, mem = _toy_memory()
    before = [mem.sample_ids[i] for i in topk_indices(q, mem, 2)]
    grown = Memory(np.vstack([mem.vectors, -q]), np.append(mem.cached_argmax, 0),
                   np.append(mem.sample_ids, 1))
    after = [grown.sample_ids[i] for i in topk_indices(q, grown, 2)]
    assert before == after


def test_plg_select_mode_and_tie():
    rng = np.random.default_rng(0)
    assert plg_select([2, 2, 3], 0.0, rng) == 2
    assert plg_select([3, 2], 0.0, rng) == 2
    with pytest.raises(ValueError):
        plg_select([], 0.5, rng)


def test_plg_select_random_frequency():
    rng = np.random.default_rng(1)
    draws = np.array([plg_select([2, 2, 3], 1.0, rng) for _ in range(10_000)])
    assert set(np.unique(draws)) == {2, 3}
    assert np.mean(draws == 2) == pytest.approx(2 / 3, abs=0.03)


@given(st.lists(st.integers(0, 5), min_size=1, max_size=9), st.randoms())
def test_plg_p0_is_function_of_multiset(labels, rnd):
    shuffled = list(labels)
    rnd.shuffle(shuffled)
    a = plg_select(labels, 0.0, np.random.default_rng(0))
    b = plg_select(shuffled, 0.0, np.random.default_rng(99))
    assert a == b


def test_snll_kl_worked_example():
    loss = snll_kl_loss([[0.8, 0.2], [0.6, 0.4]], [0, 0], alpha=0.5)
    assert loss == pytest.approx(WORKED_EXAMPLE, abs=1e-9)
    assert loss == pytest.approx(0.224634, abs=1e-6)


def test_snll_kl_degenerate_cases():
    uniform = np.full((3, 4), 0.25)
    assert snll_kl_loss(uniform, [0, 1, 2], alpha=1.0) == pytest.approx(0.0, abs=1e-12)
    onehot = np.eye(3)
    assert snll_kl_loss(onehot, [0, 1, 2], alpha=0.0) == pytest.approx(0.0, abs=1e-12)
    assert kl_to_uniform(uniform) == pytest.approx(0.0, abs=1e-12)


def test_snll_kl_multi_draw_average():
    probs = np.array([[0.8, 0.2], [0.6, 0.4]])
    multi = snll_kl_loss(probs, [[0, 1], [0, 0]], alpha=0.0)
    expected = -(math.log(0.8) + math.log(0.2) + 2 * math.log(0.6)) / 4
    assert multi == pytest.approx(expected, abs=1e-12)


@settings(max_examples=40)
@given(arrays(np.float64, (5, 4), elements=st.floats(0.01, 1.0)), st.randoms())
def test_kl_nonnegative_and_permutation_invariant(raw, rnd):
    probs = raw / raw.sum(axis=1, keepdims=True)
    assert kl_to_uniform(probs) >= -1e-12
    labels = np.argmax(raw, axis=1)
    perm = list(range(5))
    rnd.shuffle(perm)
    a = snll_kl_loss(probs, labels, 0.3)
    b = snll_kl_loss(probs[perm], labels[perm], 0.3)
    assert a == pytest.approx(b, abs=1e-12)


def test_snll_kl_op_matches_numpy_and_gradient():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(4, 3))
    labels = np.array([[0, 1], [2, 2], [1, 0], [0, 0]])

    def value(zz):
        t = tp.Tape()
        return float(t.value(snll_kl_op(t, tp.log_softmax(t, t.leaf(zz)), labels, 0.4)))

    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    assert value(z) == pytest.approx(snll_kl_loss(probs, labels, 0.4), abs=1e-12)
    t = tp.Tape()
    zi = t.leaf(z)
    t.backward(snll_kl_op(t, tp.log_softmax(t, zi), labels, 0.4))
    fd = np.zeros_like(z)
    for i in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[i] += 1e-6
        zm[i] -= 1e-6
        fd[i] = (value(zp) - value(zm)) / 2e-6
    np.testing.assert_allclose(t.grad(zi), fd, atol=1e-8)


def test_snll_kl_model_gradient_check():
    model = JasnnModel.initialize(1, base_channels=3, num_classes=3, in_channels=4,
                                  attention="sja_channelwise")
    x = np.random.default_rng(2).uniform(0, 2, (3, 8, 4))
    labels = np.array([0, 2, 1])

    def run():
        res = forward_batch(model, x, smooth=True)
        t = res.tape
        loss = snll_kl_op(t, tp.log_softmax(t, res.logits), labels, 0.3)
        return res, loss

    res, loss = run()
    res.tape.backward(loss)
    for name in ("enc_w", "cls_w"):
        g = res.tape.grad(res.param_ids[name])
        p = model.params[name]
        fd = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            vals = []
            for d in (1e-5, -1e-5):
                p[i] = old + d
                r, l = run()
                vals.append(float(r.tape.value(l)))
            p[i] = old
            fd[i] = (vals[0] - vals[1]) / 2e-5
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


@pytest.fixture(scope="module")
def tiny_setup():
    ds = synth_generate(SynthSpec(num_classes=3, num_domains=2, samples_per_class_per_domain=5,
                                  seq_len=30))
    model = JasnnModel.initialize(0, base_channels=4, num_classes=3)
    return model, ds.select_domain(1)


def test_adapt_rebuilds_and_determinism(tiny_setup):
    model, target = tiny_setup
    cfg = SsfdaConfig(epochs=3, batch_size=8, seed=5)
    m1, hist, rebuilds = adapt(model, target, cfg)
    m2, _, _ = adapt(model, target, cfg)
    assert rebuilds == 3 and len(hist) == 3
    for k in m1.params:
        np.testing.assert_array_equal(m1.params[k], m2.params[k])
    assert any(not np.array_equal(m1.params[k], model.params[k]) for k in m1.params)


def test_adapt_labels_never_reach_the_loss(tiny_setup):
    model, target = tiny_setup
    cfg = SsfdaConfig(epochs=2, batch_size=8)
    a, ha, _ = adapt(model, target, cfg, eval_labels=target.labels)
    b, hb, _ = adapt(model, target.unlabeled(), cfg)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert [r.loss for r in ha] == [r.loss for r in hb]
    assert not math.isnan(ha[0].target_accuracy) and math.isnan(hb[0].target_accuracy)


def test_adapt_errors(tiny_setup):
    model, target = tiny_setup
    with pytest.raises(ValueError):
        adapt(model, target, SsfdaConfig(k_neighbors=len(target)))
    with pytest.raises(ValueError):
        adapt(model, target.subset([]), SsfdaConfig())


def test_adapt_signature_is_source_free():
    params = set(inspect.signature(adapt).parameters)
    assert params == {"model", "target", "config", "eval_labels", "callback"}


def test_build_memory_size(tiny_setup):
    model, target = tiny_setup
    mem = build_memory(model, target)
    assert len(mem) == len(target)
    assert mem.vectors.shape == (len(target), 30 * 3)


def test_config_validation():
    with pytest.raises(ValueError):
        SsfdaConfig(explore_prob=1.5)
    with pytest.raises(ValueError):
        SsfdaConfig(k_neighbors=0)
