"""Training-loop tests: step planning, determinism, accumulation
equivalence (including ragged windows), base freezing, the loss trace
file, and accuracy evaluation."""

import copy

import numpy as np
import pytest

from qlorakit.errors import InputError
from qlorakit.model import base_fingerprint, init_adapters, init_model_params
from qlorakit.optim import TrainConfig
from qlorakit.tasks import synthetic_token_task
from qlorakit.trainer import (TraceEntry, evaluate_accuracy, planned_steps,
                              read_trace_csv, train, write_trace_csv)

from conftest import make_batch


def fresh(spec, cfg_kwargs, seed=7):
    params = init_model_params(spec, seed=seed, profile="adapter_friendly")
    cfg = TrainConfig(**cfg_kwargs)
    adapters = init_adapters(spec, cfg.rank, cfg.alpha, seed=seed + 1)
    return params, adapters, cfg


def adapter_bytes(adapters):
    return b"".join(adapters[n].b_factor.tobytes() + adapters[n].a_factor.tobytes()
                    for n in sorted(adapters))


def test_planned_steps_formula():
    cfg = TrainConfig(batch_size=2, grad_accum_steps=4, epochs=1)
    assert planned_steps(2000, cfg) == 250
    assert planned_steps(7, cfg) == 1     # one ragged window
    assert planned_steps(9, cfg) == 2
    cfg3 = TrainConfig(batch_size=2, grad_accum_steps=4, epochs=3)
    assert planned_steps(16, cfg3) == 6


def test_training_is_seed_deterministic(small_spec):
    data = make_batch(small_spec, 24, seed=1)
    runs = []
    for _ in range(2):
        params, adapters, cfg = fresh(small_spec, dict(rank=2, alpha=4.0, seed=5,
                                                       warmup_steps=1, epochs=2))
        result = train(data, params, small_spec, adapters, cfg)
        runs.append((adapter_bytes(result.adapters),
                     [(e.step, e.lr, e.loss) for e in result.trace]))
    assert runs[0] == runs[1]


@pytest.mark.parametrize("n,micro,accum", [(8, 2, 4), (7, 2, 4)])
def test_accumulation_equals_one_concatenated_batch(small_spec, n, micro, accum):
    data = make_batch(small_spec, n, seed=2)
    base = dict(rank=2, alpha=4.0, seed=9, warmup_steps=0, epochs=1)

    p1, a1, c1 = fresh(small_spec, dict(base, batch_size=micro, grad_accum_steps=accum))
    r1 = train(data, p1, small_spec, a1, c1)
    p2, a2, c2 = fresh(small_spec, dict(base, batch_size=n, grad_accum_steps=1))
    r2 = train(data, p2, small_spec, a2, c2)

    assert r1.summary["optimizer_steps"] == r2.summary["optimizer_steps"] == 1
    assert r1.trace[0].loss == pytest.approx(r2.trace[0].loss, abs=1e-12)
    for name in a1:
        assert np.max(np.abs(a1[name].a_factor - a2[name].a_factor)) <= 1e-12
        assert np.max(np.abs(a1[name].b_factor - a2[name].b_factor)) <= 1e-12


def test_base_weights_do_not_move(small_spec):
    data = make_batch(small_spec, 16, seed=3)
    params, adapters, cfg = fresh(small_spec, dict(rank=2, alpha=4.0, seed=4,
                                                   warmup_steps=1))
    before = base_fingerprint(params)
    before_adapters = adapter_bytes(adapters)
    train(data, params, small_spec, adapters, cfg)
    assert base_fingerprint(params) == before
    assert adapter_bytes(adapters) != before_adapters  # adapters did move


def test_summary_contents(small_spec):
    data = make_batch(small_spec, 20, seed=5)
    params, adapters, cfg = fresh(small_spec, dict(rank=2, alpha=4.0, seed=6,
                                                   warmup_steps=1, epochs=2))
    result = train(data, params, small_spec, adapters, cfg)
    s = result.summary
    assert s["examples"] == 20
    assert s["optimizer_steps"] == s["planned_steps"] == len(result.trace)
    assert s["final_tail_window"] == max(1, -(-len(result.trace) // 10))
    assert s["trainable_params"] == sum(a.b_factor.size + a.a_factor.size
                                        for a in adapters.values())
    assert s["total_base_params"] == small_spec.total_params()
    assert 0 < s["trainable_percent"] < 100
    assert s["train_config"]["learning_rate"] == cfg.learning_rate
    assert s["wall_time_s"] >= 0.0


def test_loss_decreases_on_separable_task():
    train_set, _ = synthetic_token_task(n_train=240, n_test=1, seed=0)
    from qlorakit.model import ToyModelSpec

    spec = ToyModelSpec(vocab_size=64, d_model=32, n_layers=2, n_heads=4,
                        d_ff=64, n_classes=4, max_seq_len=16)
    params, adapters, cfg = fresh(spec, dict(learning_rate=1e-3, seed=1,
                                             warmup_steps=2, epochs=1))
    result = train(train_set, params, spec, adapters, cfg)
    assert result.summary["final_mean_loss"] < result.summary["initial_loss"]


def test_input_validation(small_spec):
    params, adapters, cfg = fresh(small_spec, dict(rank=2, alpha=4.0))
    with pytest.raises(InputError, match="non-empty"):
        train([], params, small_spec, adapters, cfg)
    with pytest.raises(InputError, match="adapters"):
        train(make_batch(small_spec, 4), params, small_spec, {}, cfg)


def test_warmup_must_fit_in_planned_steps(small_spec):
    data = make_batch(small_spec, 8, seed=0)
    params, adapters, cfg = fresh(small_spec, dict(rank=2, alpha=4.0,
                                                   warmup_steps=5, epochs=1))
    # 8 examples, window 8 -> 1 planned step <= warmup 5
    from qlorakit.errors import ConfigError
    with pytest.raises(ConfigError, match="warmup"):
        train(data, params, small_spec, adapters, cfg)


def test_trace_csv_roundtrip(tmp_path):
    trace = [TraceEntry(step=0, lr=4e-5, loss=1.3862943611198906),
             TraceEntry(step=1, lr=8e-5, loss=1.2)]
    path = tmp_path / "trace.csv"
    write_trace_csv(trace, path)
    assert read_trace_csv(path) == trace
    assert path.read_text().splitlines()[0] == "step,lr,loss"
    bad = tmp_path / "bad.csv"
    bad.write_text("nope\n1,2,3\n")
    with pytest.raises(InputError, match="loss-trace"):
        read_trace_csv(bad)


def test_evaluate_accuracy_bounds(small_setup):
    spec, params, adapters, batch = small_setup
    acc = evaluate_accuracy(params, spec, adapters, batch)
    assert 0.0 <= acc <= 1.0
    assert acc == evaluate_accuracy(params, spec, adapters, batch)
    with pytest.raises(InputError):
        evaluate_accuracy(params, spec, adapters, [])


def test_dataset_not_mutated_by_training(small_spec):
    data = make_batch(small_spec, 12, seed=11)
    snapshot = copy.deepcopy(data)
    params, adapters, cfg = fresh(small_spec, dict(rank=2, alpha=4.0, warmup_steps=1))
    train(data, params, small_spec, adapters, cfg)
    assert all(np.array_equal(a[0], b[0]) and a[1] == b[1]
               for a, b in zip(data, snapshot))
