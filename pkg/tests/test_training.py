import math

import numpy as np
import pytest
import torch

from core.condense import condense_model
from core.errors import ArgumentError, ConfigError, NumericError, TrainingDivergedError
from core.moe_model import collect_all_gate_stats
from core.training import (
    ParamMask,
    TrainConfig,
    batch_loss,
    closed_form_trainable_fraction,
    loss_and_grads,
    lr_factor,
    sample_batch,
    train,
    write_loss_curve,
)

GRAD_STEP = 1e-5
COORDS_PER_TENSOR = 20


def _config(**overrides):
    values = {"learning_rate": 1e-2, "steps": 5, "batch_size": 2, "seq_len": 8, "eval_interval": 0}
    values.update(overrides)
    return TrainConfig(**values)


def _condensed(make_model, token_sequences, seed=0):
    model = make_model(seed=seed)
    stats = collect_all_gate_stats(token_sequences, model)
    keep = int(stats[1].activation_count.argmax())
    return condense_model(model, {1: [keep]}, stats)


def _masks(model, tokens):
    with torch.no_grad():
        return [r.mask.clone() for r in model.trace(tokens).routings]


def test_uniform_logits_loss(make_model, token_sequences):
    model = make_model()
    with torch.no_grad():
        model.lm_head.zero_()
    loss = batch_loss(model, token_sequences[:3])
    assert float(loss) == pytest.approx(math.log(256), abs=1e-5)


def test_confident_model_has_zero_loss_and_gradients(make_model):
    model = make_model(attention_enabled=False)
    tokens = [5] * 6
    with torch.no_grad():
        model.position_embedding.zero_()
        model.lm_head.zero_()
        hidden = model.trace(tokens).hidden_states[-1]
        model.lm_head[:, 5] = 50.0 * model.output_norm(hidden)[0]
    loss, grads = loss_and_grads(model, [tokens], ParamMask.all_trainable(model))
    assert loss < 1e-6
    assert max(float(g.abs().max()) for g in grads.values()) < 1e-6


def test_gradients_match_central_differences(make_model):
    model = make_model(seed=3).double()
    batch = [[7, 200, 13, 13, 99, 4, 180, 61], [33, 1, 250, 42, 42, 8, 77, 120]]
    _, grads = loss_and_grads(model, batch, ParamMask.all_trainable(model))
    reference_masks = [_masks(model, seq) for seq in batch]
    rng = np.random.default_rng(0)
    checked = 0
    for name, param in model.named_parameters():
        flat = param.data.view(-1)
        picks = rng.choice(flat.numel(), size=min(COORDS_PER_TENSOR, flat.numel()), replace=False)
        for index in picks:
            original = float(flat[index])
            values = []
            routing_changed = False
            for sign in (1.0, -1.0):
                flat[index] = original + sign * GRAD_STEP
                with torch.no_grad():
                    values.append(float(batch_loss(model, batch)))
                masks = [_masks(model, seq) for seq in batch]
                routing_changed |= any(
                    not torch.equal(a, b)
                    for seq_a, seq_b in zip(masks, reference_masks)
                    for a, b in zip(seq_a, seq_b)
                )
            flat[index] = original
            if routing_changed:
                continue
            numeric = (values[0] - values[1]) / (2 * GRAD_STEP)
            analytic = float(grads[name].reshape(-1)[index])
            assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-7, name
            checked += 1
    assert checked > 0


def test_non_finite_loss_names_the_tensor(make_model, token_sequences):
    model = make_model()
    with torch.no_grad():
        model.lm_head[0, 0] = float("nan")
    with pytest.raises(NumericError) as info:
        loss_and_grads(model, token_sequences[:2], ParamMask.all_trainable(model))
    assert info.value.tensor_name == "lm_head"


def _loss_with_inf_gradient(model, batch, aux_loss_coef=0.0):
    head = model.lm_head * 1.0
    head.register_hook(lambda grad: torch.full_like(grad, float("inf")))
    return head.sum() * 0.0 + 1.0


def test_non_finite_gradient_stops_training(make_model, token_sequences, monkeypatch):
    monkeypatch.setattr("core.training.batch_loss", _loss_with_inf_gradient)
    model = make_model()
    with pytest.raises(NumericError) as info:
        train(model, token_sequences, _config(), ParamMask.all_trainable(model))
    assert info.value.tensor_name == "lm_head.grad"
    with pytest.raises(NumericError) as info:
        loss_and_grads(model, token_sequences[:2], ParamMask.all_trainable(model))
    assert info.value.tensor_name == "lm_head.grad"


def test_load_balance_term_is_token_weighted(make_model, token_sequences):
    model = make_model(seed=3)
    long, short = token_sequences[0], token_sequences[1][:8]
    coef = 10.0
    with torch.no_grad():
        nll = {len(seq): float(batch_loss(model, [seq])) for seq in (long, short)}
        balance = {
            len(seq): (float(batch_loss(model, [seq], coef)) - nll[len(seq)]) / coef
            for seq in (long, short)
        }
        mixed = float(batch_loss(model, [long, short], coef))
    expected = (11 * nll[12] + 7 * nll[8]) / 18 + coef * (12 * balance[12] + 8 * balance[8]) / 20
    assert balance[12] > 0.0
    assert mixed == pytest.approx(expected, rel=1e-5)


def test_frozen_mask_changes_nothing(make_model, token_sequences):
    model = make_model()
    result = train(model, token_sequences, _config(), ParamMask.frozen(model))
    assert len(result.curve) == 5
    trained = result.model.state_dict()
    assert all(torch.equal(value, trained[key]) for key, value in model.state_dict().items())


def test_zero_steps_returns_an_identical_copy(make_model, token_sequences):
    model = make_model()
    result = train(model, token_sequences, _config(steps=0), ParamMask.all_trainable(model))
    assert result.model is not model
    assert result.curve == []
    trained = result.model.state_dict()
    assert all(torch.equal(value, trained[key]) for key, value in model.state_dict().items())


def test_training_leaves_the_input_model_alone(make_model, token_sequences):
    model = make_model()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    result = train(model, token_sequences, _config(), ParamMask.all_trainable(model))
    assert all(torch.equal(model.state_dict()[k], v) for k, v in before.items())
    assert not torch.equal(result.model.lm_head, model.lm_head)


def test_sft_mask_only_touches_condensed_layers(make_model, token_sequences):
    condensed = _condensed(make_model, token_sequences)
    mask = ParamMask.sft(condensed)
    assert mask.trainable_names()
    assert all(name.startswith("blocks.1.layer.") for name in mask.trainable_names())

    result = train(condensed, token_sequences, _config(), mask)
    after = dict(result.model.named_parameters())
    changed = []
    for name, param in condensed.named_parameters():
        if mask.is_trainable(name):
            changed.append(not torch.equal(param, after[name]))
        else:
            assert torch.equal(param, after[name]), name
    assert any(changed)


def test_frozen_fixed_gates(make_model, token_sequences):
    condensed = _condensed(make_model, token_sequences)
    mask = ParamMask.sft(condensed, train_fixed_gates=False)
    assert not mask.is_trainable("blocks.1.layer.fixed_gates")
    result = train(condensed, token_sequences, _config(), mask)
    assert torch.equal(
        result.model.moe_layer(1).fixed_gates, condensed.moe_layer(1).fixed_gates
    )


@pytest.mark.parametrize("train_fixed_gates", [True, False])
def test_trainable_fraction_matches_closed_form(make_model, token_sequences, train_fixed_gates):
    condensed = _condensed(make_model, token_sequences)
    mask = ParamMask.sft(condensed, train_fixed_gates)
    expected = closed_form_trainable_fraction(
        condensed.config, {1: 1}, train_fixed_gates=train_fixed_gates
    )
    assert mask.trainable_fraction(condensed) == expected
    assert 0 < expected < 1


def test_sft_mask_without_condensed_layers(make_model):
    model = make_model()
    assert ParamMask.sft(model).trainable_names() == []


def test_training_is_deterministic(make_model, token_sequences):
    model = make_model()
    runs = [
        train(model, token_sequences, _config(seed=4), ParamMask.all_trainable(model))
        for _ in range(2)
    ]
    first, second = (run.model.state_dict() for run in runs)
    assert all(torch.equal(first[key], second[key]) for key in first)
    assert [p.train_loss for p in runs[0].curve] == [p.train_loss for p in runs[1].curve]


def test_divergence_is_detected(make_model, token_sequences, monkeypatch):
    values = iter([1.0, 5000.0])

    def exploding_loss(model, batch, aux_loss_coef=0.0):
        return model.lm_head.sum() * 0.0 + next(values)

    monkeypatch.setattr("core.training.batch_loss", exploding_loss)
    model = make_model()
    with pytest.raises(TrainingDivergedError):
        train(model, token_sequences, _config(), ParamMask.all_trainable(model))


def test_sft_lowers_held_out_loss(make_model, toy_corpora):
    train_corpus, held_out = toy_corpora
    model = make_model(seed=8)
    calibration = [list(doc[:16]) for doc in train_corpus.documents[:32]]
    stats = collect_all_gate_stats(calibration, model)
    keep = [int(i) for i in np.argsort(-stats[1].activation_count, kind="stable")[:2]]
    condensed = condense_model(model, {1: keep}, stats)
    eval_sequences = [list(doc[:16]) for doc in held_out.documents]
    config = _config(learning_rate=3e-3, steps=200, batch_size=8, seq_len=16)
    result = train(
        condensed, train_corpus, config, ParamMask.sft(condensed), eval_sequences=eval_sequences
    )
    assert result.final_eval_loss < result.initial_eval_loss
    assert result.curve[-1].eval_loss == result.final_eval_loss


def test_train_config_problems_are_aggregated():
    with pytest.raises(ConfigError) as info:
        TrainConfig(learning_rate=0.0, warmup_ratio=1.0).validate()
    assert len(info.value.problems) == 2


def test_lr_schedule():
    assert lr_factor(0, 10, 0.2) == 0.5
    assert lr_factor(1, 10, 0.2) == 1.0
    assert lr_factor(2, 10, 0.2) == 1.0
    decay = [lr_factor(step, 10, 0.2) for step in range(2, 10)]
    assert decay == sorted(decay, reverse=True)
    assert decay[-1] < 0.05
    assert lr_factor(0, 10, 0.0) == 1.0


def test_sample_batch():
    rng = np.random.default_rng(0)
    batch = sample_batch([list(range(40)), [1, 2, 3]], 6, 8, rng)
    assert len(batch) == 6
    assert all(2 <= len(seq) <= 8 for seq in batch)
    with pytest.raises(ArgumentError):
        batch_loss(None, [[1]])


def test_loss_curve_file(tmp_path, make_model, token_sequences):
    model = make_model()
    result = train(model, token_sequences, _config(steps=3), ParamMask.all_trainable(model))
    write_loss_curve(result.curve, tmp_path / "curve.csv")
    lines = (tmp_path / "curve.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "step,lr,train_loss,eval_loss"
    assert len(lines) == 4
