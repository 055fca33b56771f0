import math

import numpy as np
import pytest

from mlakit.conversion import ConversionSpec, convert_model
from mlakit.errors import ArgumentError, ConfigurationError, TrainingDivergedError
from mlakit.layers import log_softmax
from mlakit.model import ModelSpec, Seq2SeqModel
from mlakit.training import (
    DSO_FREEZE,
    Batch,
    SyntheticTask,
    TrainConfig,
    _cross_entropy,
    backward,
    evaluate,
    finetune,
    finite_diff_check,
    forward_loss,
    frozen_names,
    relative_error,
    train_on,
    write_trace,
)

TINY = ModelSpec(d_model=8, n_heads=2, n_encoder_layers=1, n_decoder_layers=1, d_ff=16,
                 vocab_size=12, max_source_len=16, max_target_len=16)


def _batch(vocab=12, seed=0):
    task = SyntheticTask(vocab_size=vocab, seq_len_range=(2, 5), sample_count=3, seed=seed)
    return Batch.from_pairs(task.samples())


def test_synthetic_task_is_deterministic():
    a, b = SyntheticTask(seed=4).samples(), SyntheticTask(seed=4).samples()
    assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(a, b))
    rev = SyntheticTask(kind="reverse", seed=4).samples()
    assert all(np.array_equal(s[::-1], t) for s, t in rev)
    heldout = SyntheticTask(seed=4).samples("heldout")
    assert len(a) == 2000 and len(heldout) == 200
    assert all(1 <= len(s) <= 16 and s.min() >= 3 for s, _ in a)


def test_synthetic_task_validation():
    for bad in [dict(kind="sort"), dict(seq_len_range=(0, 3)), dict(vocab_size=3)]:
        with pytest.raises(ConfigurationError):
            SyntheticTask(**bad)


def test_batch_layout():
    batch = Batch.from_pairs([(np.array([5, 6]), np.array([5, 6])), (np.array([7]), np.array([7]))])
    assert batch.tgt_in.tolist() == [[1, 5, 6], [1, 7, 0]]
    assert batch.tgt_out.tolist() == [[5, 6, 2], [7, 2, 0]]


def test_cross_entropy_uniform_logits():
    tgt = np.array([[5, 9, 0]])
    loss, _, _, count = _cross_entropy(np.zeros((1, 3, 64)), tgt)
    assert loss == pytest.approx(math.log(64), abs=1e-12) and count == 2


def test_cross_entropy_confident_logits():
    logits = np.full((1, 2, 8), -50.0)
    logits[0, 0, 3] = logits[0, 1, 4] = 50.0
    loss, _, correct, _ = _cross_entropy(logits, np.array([[3, 4]]))
    assert loss < 1e-30 and correct == 2


def test_cross_entropy_matches_explicit_sum(rng):
    logits = rng.standard_normal((2, 4, 10))
    tgt = np.array([[1, 2, 3, 0], [4, 5, 0, 0]])
    expected, n = 0.0, 0
    for b in range(2):
        for t in range(4):
            if tgt[b, t]:
                row = logits[b, t]
                expected -= row[tgt[b, t]] - np.log(np.sum(np.exp(row)))
                n += 1
    assert _cross_entropy(logits, tgt)[0] == pytest.approx(expected / n, abs=1e-10)
    np.testing.assert_allclose(log_softmax(logits).max(axis=-1) <= 0, True)


def test_all_pad_batch_rejected():
    with pytest.raises(ArgumentError):
        _cross_entropy(np.zeros((1, 2, 4)), np.zeros((1, 2), int))


@pytest.mark.parametrize("variant", ["mha", "mla_full", "mla_preserving"])
def test_gradients_match_finite_differences(variant):
    model = Seq2SeqModel.initialize(TINY, seed=1)
    if variant != "mha":
        r = 1 if variant == "mla_preserving" else 0
        strategy = "uniform" if r else "full_compression"
        model = convert_model(model, ConversionSpec(strategy, 3, r, "full"),
                              float_dtype="f64").to_model()
    report = finite_diff_check(model, _batch(), sample_count=60, seed=2)
    assert report.passed and report.max_relative_error <= 1e-4
    if variant == "mla_preserving":
        _, grads = backward(model, _batch())
        assert {"w_kp", "w_dkv", "w_uk", "w_uv"} <= {n.rsplit(".", 1)[1] for n in grads}


def test_finite_diff_report_is_deterministic():
    model = Seq2SeqModel.initialize(TINY, seed=1)
    a = finite_diff_check(model, _batch(), sample_count=5, seed=9)
    b = finite_diff_check(model, _batch(), sample_count=5, seed=9)
    assert a.rows == b.rows
    assert set(a.per_tensor()) == {r["name"] for r in a.rows}


def test_relative_error_floor():
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-6)
    assert relative_error(2.0, 1.0) == 0.5


def test_frozen_gradients_are_zero():
    model = Seq2SeqModel.initialize(TINY, seed=1)
    frozen = frozen_names(model, DSO_FREEZE)
    _, grads = backward(model, _batch(), frozen)
    assert frozen and all(not np.any(grads[n]) for n in frozen)
    assert any(np.any(grads[n]) for n in grads if n not in frozen)
    assert not any(n.startswith("decoder.layers.0.self_attn") for n in frozen)
    with pytest.raises(ConfigurationError):
        frozen_names(model, {"everything"})


def test_confident_predictions_give_tiny_gradients():
    batch = _batch()
    logits = np.full(batch.tgt_out.shape + (12,), -60.0)
    np.put_along_axis(logits, batch.tgt_out[..., None], 60.0, axis=-1)
    _, dlogits, _, _ = _cross_entropy(logits, batch.tgt_out)
    assert np.abs(dlogits).max() <= 1e-8


def test_finetune_is_deterministic_and_respects_freeze():
    model = Seq2SeqModel.initialize(TINY, seed=1)
    task = SyntheticTask(vocab_size=12, seq_len_range=(1, 4), sample_count=24, heldout_count=8)
    cfg = TrainConfig(epochs=2, batch_size=8)
    a, trace_a = finetune(model, task, cfg, freeze=DSO_FREEZE)
    b, trace_b = finetune(model, task, cfg, freeze=DSO_FREEZE)
    assert trace_a == trace_b
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    for name in frozen_names(model, DSO_FREEZE):
        assert a.params[name].tobytes() == model.params[name].tobytes()
    assert [(r["epoch"], r["split"]) for r in trace_a] == [
        (1, "train"), (1, "heldout"), (2, "train"), (2, "heldout")]


def test_loss_drops_below_chance_after_one_epoch():
    model = Seq2SeqModel.initialize(seed=0)
    _, trace = finetune(model, SyntheticTask(), TrainConfig(epochs=1))
    assert trace[0]["loss"] < math.log(64)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step():
    model = Seq2SeqModel.initialize(TINY, seed=0)
    model.params["decoder.ln.g"][:] = 1e308
    with pytest.raises(TrainingDivergedError) as info:
        train_on(model, SyntheticTask(vocab_size=12, sample_count=4).samples(),
                 TrainConfig(epochs=1, batch_size=4))
    assert info.value.step == 1


def test_train_config_validation():
    for bad in [dict(epochs=0), dict(learning_rate=0), dict(optimizer="rmsprop"),
                dict(schedule="step")]:
        with pytest.raises((ConfigurationError, ArgumentError)):
            TrainConfig(**bad)
    cfg = TrainConfig(schedule="cosine", learning_rate=1.0)
    assert cfg.rate(0, 10) == 1.0 and cfg.rate(5, 10) == pytest.approx(0.5)


def test_sgd_step_reduces_loss():
    model = Seq2SeqModel.initialize(TINY, seed=0)
    pairs = SyntheticTask(vocab_size=12, seq_len_range=(2, 5), sample_count=3).samples()
    cfg = TrainConfig(epochs=1, batch_size=3, optimizer="sgd", learning_rate=0.1,
                      gradient_clip=0)
    trained, _ = train_on(model, pairs, cfg)
    batch = Batch.from_pairs(pairs)
    assert forward_loss(trained, batch) < forward_loss(model, batch)


def test_evaluate_and_trace(tmp_path):
    model = Seq2SeqModel.initialize(TINY, seed=0)
    samples = SyntheticTask(vocab_size=12, sample_count=5).samples()
    loss, acc = evaluate(model, samples)
    assert loss > 0 and 0 <= acc <= 1
    path = tmp_path / "trace.csv"
    write_trace([{"epoch": 1, "split": "train", "loss": 1.5, "token_accuracy": 0.25}], path)
    assert path.read_text().splitlines() == ["epoch,split,loss,token_accuracy",
                                             "1,train,1.5,0.25"]
