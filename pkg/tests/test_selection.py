from collections import Counter

import pytest
import torch

from core.condense import condense_layer, condense_model
from core.errors import ArgumentError, StateError
from core.metrics import output_divergence
from core.moe_model import GateStats, capture_layer_inputs, collect_all_gate_stats
from core.selection import (
    ExpertPlan,
    SelectionTrace,
    SweepRow,
    alpha_hill_expert_selection,
    block_influence_scores,
    block_influence_selection,
    build_condensed_layers,
    build_expert_plan,
    exhaustive_expert_selection,
    global_layer_rank_scores,
    global_layer_rank_selection,
    greedy_expert_selection,
    greedy_layer_selection,
    l1_expert_selection,
    layer_rank_scores,
    layer_rank_selection,
    layer_sweep,
    random_expert_selection,
    random_layer_selection,
    read_sweep_csv,
    write_sweep_csv,
)
from core.spectral import AlphaHillScore


def _zero_experts(layer):
    with torch.no_grad():
        for expert in list(layer.experts) + list(layer.shared):
            for param in expert.parameters():
                param.zero_()


def _shared_only_plan(model):
    return {index: [] for index in model.routed_layer_indices()}


def _identity_block(model, index):
    block = model.blocks[index]
    with torch.no_grad():
        block.attention.w_o.zero_()
        for expert in list(block.layer.experts) + list(block.layer.shared):
            expert.w_down.zero_()


# Expert selection


def test_record_breaks_ties_by_lowest_index():
    trace = SelectionTrace(kind="expert", method="greedy", metric="js")
    assert trace.record({2: 0.5, 0: 0.5, 1: 0.7}) == 0
    assert trace.step_losses == [0.5]


def test_single_expert_layer(make_model, token_sequences):
    model = make_model(num_routing_experts=1, k_active=1)
    assert greedy_expert_selection(model, 0, token_sequences, 1).chosen == [0]


def test_token_independent_router(make_model, token_sequences):
    model = make_model()
    with torch.no_grad():
        model.moe_layer(0).centroids.zero_()
    trace = greedy_expert_selection(model, 0, token_sequences, 2)
    assert sorted(trace.chosen) == [0, 1]
    assert trace.step_losses[1] <= trace.step_losses[0]
    assert trace.step_losses[1] < 1e-10
    assert set(trace.candidate_losses[0]) == {0, 1}


def test_first_pick_matches_independent_condensation(make_model, token_sequences):
    model = make_model(seed=7, num_routing_experts=5)
    layer = model.moe_layer(1)
    trace = greedy_expert_selection(model, 1, token_sequences, 2)

    inputs = capture_layer_inputs(model, token_sequences, 1)
    stats = GateStats.empty(5, 2)
    with torch.no_grad():
        _, routing = layer.expert_mix(inputs)
        stats.update(routing)
        reference = layer(inputs)
        losses = {
            i: output_divergence(reference, condense_layer(layer, [i], stats)(inputs))
            for i in range(5)
            if stats.activation_count[i] > 0
        }
    best = min(sorted(losses), key=lambda i: losses[i])
    assert trace.chosen[0] == best
    assert trace.step_losses[0] == losses[best]


def test_every_step_commits_the_candidate_minimum(make_model, token_sequences):
    trace = greedy_expert_selection(make_model(seed=2), 0, token_sequences, 2, metric="kl")
    for chosen, loss, table in zip(trace.chosen, trace.step_losses, trace.candidate_losses):
        assert loss == min(table.values())
        assert chosen == min(i for i, value in table.items() if value == loss)
    assert len(set(trace.chosen)) == 2
    assert trace.chosen[0] not in trace.candidate_losses[1]


@pytest.mark.parametrize("seed", range(20))
def test_greedy_against_exhaustive(make_model, token_sequences, seed):
    model = make_model(seed=seed, num_blocks=1, num_routing_experts=6, k_active=3)
    trace = greedy_expert_selection(model, 0, token_sequences, 3)
    best = exhaustive_expert_selection(model, 0, token_sequences, 3)
    single = exhaustive_expert_selection(model, 0, token_sequences, 1)
    assert trace.chosen[0] == single.subset[0]
    assert trace.step_losses[-1] >= best.loss - 1e-9
    assert best.evaluated >= 1


def test_expert_search_argument_checks(make_model, token_sequences):
    model = make_model()
    with pytest.raises(ArgumentError):
        greedy_expert_selection(model, 0, token_sequences, 5)
    with pytest.raises(ArgumentError):
        greedy_expert_selection(model, 0, [], 1)
    with pytest.raises(ArgumentError):
        greedy_expert_selection(model, 0, token_sequences, 1, metric="ppl")
    stats = collect_all_gate_stats(token_sequences, model)
    with pytest.raises(StateError):
        greedy_expert_selection(condense_model(model, {0: []}, stats), 0, token_sequences, 1)


def test_random_expert_selection():
    assert sorted(random_expert_selection(3, 3, seed=0)) == [0, 1, 2]
    assert random_expert_selection(8, 3, seed=4) == random_expert_selection(8, 3, seed=4)
    counts = Counter(random_expert_selection(4, 1, seed)[0] for seed in range(10_000))
    for expert in range(4):
        assert counts[expert] / 10_000 == pytest.approx(0.25, abs=0.02)
    with pytest.raises(ArgumentError):
        random_expert_selection(3, 4, seed=0)


def test_l1_selection(make_model):
    layer = make_model(num_routing_experts=3, k_active=1).moe_layer(0)
    _zero_experts(layer)
    assert l1_expert_selection(layer, 2) == [0, 1]
    with torch.no_grad():
        for expert, norm in zip(layer.experts, [5.0, 1.0, 3.0]):
            expert.w_gate[0, 0] = norm
    assert l1_expert_selection(layer, 1) == [1]
    assert l1_expert_selection(layer, 2) == [1, 2]


def test_alpha_hill_selection_ranks_heavy_tails_first(make_model, monkeypatch):
    layer = make_model(num_routing_experts=3, k_active=1).moe_layer(0)
    alphas = {id(expert): value for expert, value in zip(layer.experts, [3.0, 1.5, 2.2])}
    monkeypatch.setattr(
        "core.selection.alpha_hill", lambda expert: AlphaHillScore(alphas[id(expert)], 2)
    )
    assert alpha_hill_expert_selection(layer, 1) == [1]
    assert alpha_hill_expert_selection(layer, 3) == [1, 2, 0]
    alphas.update({key: 2.0 for key in alphas})
    assert alpha_hill_expert_selection(layer, 2) == [0, 1]


def test_alpha_hill_selection_on_real_spectra(make_model):
    layer = make_model(seed=5).moe_layer(0)
    assert len(set(alpha_hill_expert_selection(layer, 2))) == 2


def test_expert_plans(make_model, token_sequences, tmp_path):
    model = make_model()
    greedy = build_expert_plan(model, token_sequences, 1, "greedy")
    assert sorted(greedy.keep) == [0, 1]
    assert greedy.traces[0].chosen == greedy.keep[0]
    assert greedy.keep_count == 1

    random_plan = build_expert_plan(model, token_sequences, 2, "random", seed=3)
    assert random_plan.keep[1] == random_expert_selection(4, 2, 4)

    trim = build_expert_plan(model, token_sequences, 2, "layer_trim")
    assert trim.trim and trim.keep == {0: [], 1: []}

    with pytest.raises(ArgumentError):
        build_expert_plan(model, token_sequences, 1, "magnitude")

    greedy.save(tmp_path / "plan.json")
    assert ExpertPlan.load(tmp_path / "plan.json").to_dict() == greedy.to_dict()


# Layer selection


def test_single_block_model(make_model, token_sequences):
    model = make_model(num_blocks=1)
    assert greedy_layer_selection(model, token_sequences, 1, _shared_only_plan(model)).chosen == [0]


def test_lossless_layer_is_chosen_first(make_model, token_sequences):
    model = make_model(seed=1, num_blocks=4)
    _zero_experts(model.moe_layer(2))
    plan = _shared_only_plan(model)
    trace = greedy_layer_selection(model, token_sequences, 2, plan)
    assert trace.chosen[0] == 2
    assert trace.step_losses[0] < 1e-8
    assert layer_rank_selection(model, token_sequences, 1, plan) == [2]
    assert global_layer_rank_selection(model, token_sequences, 1, plan) == [2]
    assert layer_rank_scores(model, token_sequences, plan)[2] == 0.0


def test_first_layer_pick_matches_independent_condensation(make_model, token_sequences):
    model = make_model(seed=6, num_blocks=4)
    plan = _shared_only_plan(model)
    stats = collect_all_gate_stats(token_sequences, model)
    with torch.no_grad():
        reference = torch.cat([model(seq) for seq in token_sequences])
        losses = {}
        for index in range(4):
            candidate = condense_model(model, {index: []}, stats)
            logits = torch.cat([candidate(seq) for seq in token_sequences])
            losses[index] = output_divergence(reference, logits)
    best = min(sorted(losses), key=lambda i: losses[i])

    trace = greedy_layer_selection(model, token_sequences, 3, plan)
    assert trace.chosen[0] == best
    assert trace.step_losses[0] == losses[best]
    assert len(set(trace.chosen)) == 3
    assert global_layer_rank_selection(model, token_sequences, 1, plan) == [best]
    assert global_layer_rank_scores(model, token_sequences, plan) == losses


def test_layer_search_leaves_model_routed(make_model, token_sequences):
    model = make_model(num_blocks=3)
    greedy_layer_selection(model, token_sequences, 2, _shared_only_plan(model), metric="ppl")
    assert model.layer_kinds() == ["routed"] * 3


def test_layer_selection_argument_checks(make_model, token_sequences):
    model = make_model()
    plan = _shared_only_plan(model)
    with pytest.raises(ArgumentError):
        greedy_layer_selection(model, token_sequences, 3, plan)
    with pytest.raises(ArgumentError):
        layer_rank_scores(model, token_sequences, plan, metric="ppl")
    assert greedy_layer_selection(model, token_sequences, 0, plan).chosen == []


def test_random_layer_selection(make_model):
    model = make_model(num_blocks=5)
    chosen = random_layer_selection(model, 3, seed=2)
    assert len(set(chosen)) == 3
    assert chosen == random_layer_selection(model, 3, seed=2)


def test_layer_sweep(make_model, token_sequences, tmp_path):
    model = make_model(seed=3, num_blocks=3)
    plan = _shared_only_plan(model)
    rows = layer_sweep(model, token_sequences, plan)
    assert [row.layer_index for row in rows] == [0, 1, 2]
    scores = global_layer_rank_scores(model, token_sequences, plan)
    assert [row.js for row in rows] == [scores[i] for i in range(3)]
    assert all(row.kl >= 0 and row.ppl_delta >= 0 for row in rows)

    write_sweep_csv(rows, tmp_path / "sweep.csv")
    header = (tmp_path / "sweep.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header == "layer_index,js,kl,ppl_delta"
    assert read_sweep_csv(tmp_path / "sweep.csv") == rows
    assert isinstance(rows[0], SweepRow)


def test_partial_plan_is_rejected(make_model, token_sequences):
    model = make_model(num_blocks=3)
    stats = collect_all_gate_stats(token_sequences, model)
    with pytest.raises(StateError):
        build_condensed_layers(model, {0: [], 2: []}, stats, [0, 1, 2])
    with pytest.raises(StateError):
        greedy_layer_selection(model, token_sequences, 1, {0: []})


def test_greedy_expert_selection_follows_expert_permutation(make_model, token_sequences):
    model = make_model(seed=9, num_routing_experts=5, k_active=2)
    permuted = make_model(seed=9, num_routing_experts=5, k_active=2)
    perm = [3, 0, 4, 1, 2]
    source, target = model.moe_layer(0), permuted.moe_layer(0)
    with torch.no_grad():
        target.centroids.copy_(source.centroids[perm])
        for new, old in enumerate(perm):
            target.experts[new].load_state_dict(source.experts[old].state_dict())
    original = greedy_expert_selection(model, 0, token_sequences, 3)
    relabelled = greedy_expert_selection(permuted, 0, token_sequences, 3)
    assert [perm[j] for j in relabelled.chosen] == original.chosen
    assert relabelled.step_losses == pytest.approx(original.step_losses, abs=1e-9)


# Block influence


@pytest.mark.parametrize("scope", ["block", "layer"])
def test_identity_block_has_zero_influence(make_model, token_sequences, scope):
    model = make_model(seed=4, num_blocks=4)
    _identity_block(model, 2)
    scores = block_influence_scores(model, token_sequences, scope)
    assert sorted(scores) == [0, 1, 2, 3]
    assert scores[2] == pytest.approx(0.0, abs=1e-12)
    assert all(scores[i] > 0.0 for i in (0, 1, 3))
    assert block_influence_selection(model, token_sequences, 1, scope) == [2]


def test_block_influence_scores_by_hand(make_model, token_sequences):
    model = make_model(seed=2)
    sequences = token_sequences[:2]
    scores = block_influence_scores(model, sequences, "block")
    with torch.no_grad():
        for index in (0, 1):
            cosines = []
            for seq in sequences:
                trace = model.trace(seq)
                cosines.append(
                    torch.nn.functional.cosine_similarity(
                        trace.block_inputs[index].double(),
                        trace.hidden_states[index].double(),
                        dim=-1,
                    )
                )
            assert scores[index] == pytest.approx(1.0 - float(torch.cat(cosines).mean()), abs=1e-9)


def test_block_influence_argument_checks(make_model, token_sequences):
    model = make_model()
    with pytest.raises(ArgumentError):
        block_influence_scores(model, token_sequences, "head")
    with pytest.raises(ArgumentError):
        block_influence_scores(model, [])
    with pytest.raises(ArgumentError):
        block_influence_selection(model, token_sequences, 3)


def test_block_trim_plan_drops_whole_blocks(make_model, token_sequences):
    model = make_model(seed=4, num_blocks=4)
    _identity_block(model, 1)
    plan = build_expert_plan(model, token_sequences, 2, "block_trim")
    assert plan.drop_blocks and not plan.trim
    assert plan.keep == {0: [], 1: [], 2: [], 3: []}
    assert ExpertPlan.from_dict(plan.to_dict()).drop_blocks

    trace = greedy_layer_selection(model, token_sequences, 2, plan)
    assert trace.chosen[0] == 1
    assert trace.step_losses[0] == pytest.approx(0.0, abs=1e-12)
    assert model.layer_kinds() == ["routed"] * 4
