"""One function per CLI subcommand; each reads and writes only run-directory artifacts."""

import json
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from core.calibration import (
    Corpus,
    encode,
    generate_corpus,
    load_calibration,
    load_corpus,
    sample_calibration,
    save_calibration,
    save_corpus,
    split_corpus,
)
from core.checkpoint import load_checkpoint, save_checkpoint
from core.condense import condense_model, cost_report, measure_throughput, variant_label
from core.errors import ArgumentError, StateError
from core.metrics import corpus_perplexity
from core.moe_model import GateStats, MoEModel, collect_all_gate_stats
from core.path_utils import RunPaths, get_run_paths, require_artifact
from core.selection import (
    ExpertPlan,
    SelectionTrace,
    block_influence_scores,
    build_expert_plan,
    global_layer_rank_scores,
    greedy_layer_selection,
    layer_rank_scores,
    layer_sweep,
    random_layer_selection,
    write_sweep_csv,
)
from core.settings import RunConfig
from core.training import (
    ParamMask,
    closed_form_trainable_fraction,
    train,
    write_loss_curve,
)
from pipeline.report import build_report, write_report

logger = logging.getLogger(__name__)

ProgressCallback = Optional[Callable[[str], None]]
CHECKPOINTS = ("pretrained", "condensed", "sft")


def _write_json(path: Path, data: Any):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_json(path: Path) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def save_gate_stats(stats: Dict[int, GateStats], path: Path):
    """Write per-layer gate statistics as JSON."""
    _write_json(path, {str(index): s.to_dict() for index, s in sorted(stats.items())})


def load_gate_stats(path: Path) -> Dict[int, GateStats]:
    """Read statistics written by ``save_gate_stats``."""
    return {int(k): GateStats.from_dict(v) for k, v in _read_json(path).items()}


def eval_sequences(corpus: Corpus, max_seq_len: int) -> List[List[int]]:
    """Held-out documents as token sequences of at least two tokens."""
    return [encode(doc[:max_seq_len]) for doc in corpus.documents if len(doc[:max_seq_len]) >= 2]


def _load_model(paths: RunPaths, name: str) -> MoEModel:
    produced_by = {"pretrained": "pretrain", "condensed": "condense", "sft": "sft"}[name]
    return load_checkpoint(require_artifact(paths.checkpoint(name), produced_by))


def _load_calibration(config: RunConfig, paths: RunPaths):
    require_artifact(paths.calibration, "calibrate")
    source = paths.task_corpus if config.calibration_source == "task" else paths.train_corpus
    tag = "task_a" if config.calibration_source == "task" else "general"
    corpus = load_corpus(require_artifact(source, "pretrain"), tag)
    return load_calibration(paths.calibration, corpus)


def _held_out(config: RunConfig, paths: RunPaths) -> List[List[int]]:
    corpus = load_corpus(require_artifact(paths.held_out_corpus, "pretrain"))
    return eval_sequences(corpus, config.model.max_seq_len)


def run_pretrain(config: RunConfig, paths: RunPaths, progress_callback: ProgressCallback = None):
    """Generate the corpora, train a fresh model on the general split and save it."""
    data_seed = config.stage_seed("data")
    general = generate_corpus("markov", data_seed, config.corpus_size)
    train_corpus, held_out = split_corpus(general, config.held_out_fraction, data_seed)
    task = generate_corpus("template", data_seed + 1, config.task_corpus_size)
    save_corpus(train_corpus, paths.train_corpus)
    save_corpus(held_out, paths.held_out_corpus)
    save_corpus(task, paths.task_corpus)
    logger.info(
        "corpora: %d train, %d held-out, %d task documents",
        len(train_corpus),
        len(held_out),
        len(task),
    )

    model = MoEModel(config.model, seed=config.stage_seed("init"))
    held = eval_sequences(held_out, config.model.max_seq_len)
    result = train(
        model,
        train_corpus,
        config.pretrain,
        ParamMask.all_trainable(model),
        eval_sequences=held,
        progress_callback=progress_callback,
    )
    save_checkpoint(result.model, paths.pretrained)
    write_loss_curve(result.curve, paths.loss_curve("pretrain"))
    _write_json(paths.run_config, config.settings)
    return result


def run_calibrate(config: RunConfig, paths: RunPaths, progress_callback: ProgressCallback = None):
    """Sample the calibration set and record gate statistics of every routed layer."""
    model = _load_model(paths, "pretrained")
    source = paths.task_corpus if config.calibration_source == "task" else paths.train_corpus
    tag = "task_a" if config.calibration_source == "task" else "general"
    corpus = load_corpus(require_artifact(source, "pretrain"), tag)
    calibration = sample_calibration(
        corpus,
        config.calibration_count,
        config.calibration_max_seq_len,
        config.stage_seed("calibration"),
    )
    save_calibration(calibration, paths.calibration)
    stats = collect_all_gate_stats(calibration, model)
    for index, layer_stats in stats.items():
        inactive = layer_stats.never_activated()
        if inactive:
            logger.warning("layer %d: experts %s never activated", index, inactive)
    save_gate_stats(stats, paths.gate_stats)
    if progress_callback:
        progress_callback(f"calibration: {calibration.count} sequences from {tag} data")
    return calibration, stats


def run_select_experts(
    config: RunConfig, paths: RunPaths, progress_callback: ProgressCallback = None
) -> ExpertPlan:
    """Build the expert plan for every routed layer."""
    model = _load_model(paths, "pretrained")
    calibration = _load_calibration(config, paths)
    plan = build_expert_plan(
        model,
        calibration,
        config.experts_per_condensed_layer,
        method=config.expert_method,
        seed=config.stage_seed("selection"),
        metric=config.expert_metric,
        progress_callback=progress_callback,
    )
    plan.save(paths.expert_plan)
    return plan


def _one_shot_trace(method: str, metric: str, scores: Dict[int, float], k: int) -> SelectionTrace:
    order = sorted(scores, key=lambda i: (scores[i], i))[:k]
    return SelectionTrace(
        kind="layer",
        method=method,
        metric=metric,
        chosen=order,
        step_losses=[scores[i] for i in order],
        candidate_losses=[dict(scores)],
    )


def run_select_layers(
    config: RunConfig, paths: RunPaths, progress_callback: ProgressCallback = None
) -> SelectionTrace:
    """Choose the layers to condense with the configured layer selector."""
    model = _load_model(paths, "pretrained")
    calibration = _load_calibration(config, paths)
    plan = ExpertPlan.load(require_artifact(paths.expert_plan, "select-experts"))
    stats = load_gate_stats(require_artifact(paths.gate_stats, "calibrate"))
    allow = config.allow_inactive_experts
    method = config.layer_method
    if method == "greedy":
        trace = greedy_layer_selection(
            model,
            calibration,
            config.k_layers,
            plan,
            stats,
            config.metric,
            allow,
            progress_callback,
        )
    elif method == "layer_rank":
        scores = layer_rank_scores(model, calibration, plan, stats, config.metric, allow)
        trace = _one_shot_trace(method, config.metric, scores, config.k_layers)
    elif method == "global_layer_rank":
        scores = global_layer_rank_scores(model, calibration, plan, stats, config.metric, allow)
        trace = _one_shot_trace(method, config.metric, scores, config.k_layers)
    elif method == "block_influence":
        # whole-block influence for BlockTrim, MoE-sublayer influence otherwise
        scope = "block" if plan.drop_blocks else "layer"
        scores = block_influence_scores(model, calibration, scope)
        trace = _one_shot_trace(method, f"influence_{scope}", scores, config.k_layers)
    else:
        chosen = random_layer_selection(model, config.k_layers, config.stage_seed("selection"))
        trace = SelectionTrace(kind="layer", method=method, metric="none", chosen=chosen)
    trace.fingerprint.setdefault("calibration", calibration.fingerprint)
    trace.fingerprint["seed"] = config.seed
    trace.save(paths.layer_selection)
    logger.info("layers to condense: %s", trace.chosen)
    return trace


def condensation_layers(
    plan: ExpertPlan, chosen: List[int], keep_count: int
) -> Dict[int, List[int]]:
    """Experts to keep in each chosen layer, cut to the first ``keep_count`` of the plan.

    Plans list experts in selection order, so a prefix is the selector's answer
    for a smaller budget. Trim and block-drop plans keep nothing.
    """
    missing = [index for index in chosen if index not in plan.keep]
    if missing:
        raise StateError(
            f"expert plan has no entry for layer(s) {missing}; run 'select-experts' again"
        )
    if plan.trim or plan.drop_blocks:
        return {index: [] for index in chosen}
    layers = {}
    for index in chosen:
        keep = plan.keep[index]
        if len(keep) < keep_count:
            raise StateError(
                f"expert plan keeps {len(keep)} expert(s) in layer {index} but {keep_count} "
                f"are requested; run 'select-experts' with --keep {keep_count}"
            )
        layers[index] = list(keep[:keep_count])
    return layers


def run_condense(config: RunConfig, paths: RunPaths, progress_callback: ProgressCallback = None):
    """Condense the selected layers of the pretrained model with the saved expert plan."""
    model = _load_model(paths, "pretrained")
    plan = ExpertPlan.load(require_artifact(paths.expert_plan, "select-experts"))
    trace = SelectionTrace.load(require_artifact(paths.layer_selection, "select-layers"))
    stats = load_gate_stats(require_artifact(paths.gate_stats, "calibrate"))
    layers = condensation_layers(plan, trace.chosen, config.experts_per_condensed_layer)
    condensed = condense_model(
        model,
        layers,
        stats,
        allow_inactive=config.allow_inactive_experts,
        trim=plan.trim,
        drop_blocks=plan.drop_blocks,
    )
    save_checkpoint(condensed, paths.condensed)
    if progress_callback:
        progress_callback(f"condensed layers {sorted(layers)} ({variant_label(condensed)})")
    return condensed


def run_sft(config: RunConfig, paths: RunPaths, progress_callback: ProgressCallback = None):
    """Fine-tune only the condensed layers on the general training corpus."""
    model = _load_model(paths, "condensed")
    corpus = load_corpus(require_artifact(paths.train_corpus, "pretrain"))
    mask = ParamMask.sft(model, train_fixed_gates=config.train_fixed_gates)
    result = train(
        model,
        corpus,
        config.sft,
        mask,
        eval_sequences=_held_out(config, paths),
        progress_callback=progress_callback,
    )
    save_checkpoint(result.model, paths.finetuned)
    write_loss_curve(result.curve, paths.loss_curve("sft"))
    kept = {
        index: len(block.layer.experts)
        for index, block in enumerate(model.blocks)
        if block.layer.layer_kind == "condensed"
    }
    trimmed = [
        index
        for index, block in enumerate(model.blocks)
        if block.layer.layer_kind == "condensed" and len(block.layer.shared) == 0
    ]
    dropped = [
        index for index, block in enumerate(model.blocks) if block.layer.layer_kind == "dropped"
    ]
    _write_json(
        paths.evaluation("sft_training"),
        {
            "trainable_fraction": mask.trainable_fraction(model),
            "closed_form_trainable_fraction": closed_form_trainable_fraction(
                config.model, kept, trimmed, config.train_fixed_gates, dropped
            ),
            "initial_eval_loss": result.initial_eval_loss,
            "final_eval_loss": result.final_eval_loss,
            "steps": config.sft.steps,
        },
    )
    return result


def run_eval(
    config: RunConfig,
    paths: RunPaths,
    checkpoint: str = "pretrained",
    progress_callback: ProgressCallback = None,
) -> Dict[str, Any]:
    """Cost accounting and held-out perplexity of one checkpoint."""
    if checkpoint not in CHECKPOINTS:
        raise ArgumentError(f"checkpoint must be one of {CHECKPOINTS}")
    model = _load_model(paths, checkpoint)
    held = _held_out(config, paths)
    throughput = measure_throughput(model) if config.measure_throughput else None
    result = {
        "checkpoint": checkpoint,
        "variant": variant_label(model),
        "layer_kinds": model.layer_kinds(),
        "cost": cost_report(model, throughput).to_dict(),
        "held_out_perplexity": corpus_perplexity(held, model),
        "held_out_sequences": len(held),
    }
    _write_json(paths.evaluation(checkpoint), result)
    if progress_callback:
        progress_callback(
            f"{checkpoint}: {result['variant']} ppl {result['held_out_perplexity']:.4f} "
            f"memory {result['cost']['memory_ratio']:.4f}"
        )
    return result


def run_sweep(config: RunConfig, paths: RunPaths, progress_callback: ProgressCallback = None):
    """Per-layer final-output divergence when each layer is condensed on its own."""
    model = _load_model(paths, "pretrained")
    calibration = _load_calibration(config, paths)
    plan = ExpertPlan.load(require_artifact(paths.expert_plan, "select-experts"))
    stats = load_gate_stats(require_artifact(paths.gate_stats, "calibrate"))
    rows = layer_sweep(
        model, calibration, plan, stats, config.allow_inactive_experts, progress_callback
    )
    write_sweep_csv(rows, paths.sweep_csv)
    return rows


def run_report(config: RunConfig, paths: RunPaths, progress_callback: ProgressCallback = None):
    """Assemble and write the run report."""
    report = build_report(config, paths)
    write_report(report, paths)
    if progress_callback:
        progress_callback(f"report written to {paths.report_json.name}")
    return report


def run_pipeline(config: RunConfig, paths: RunPaths, progress_callback: ProgressCallback = None):
    """Every stage in order under one output directory."""
    run_pretrain(config, paths, progress_callback)
    run_calibrate(config, paths, progress_callback)
    run_select_experts(config, paths, progress_callback)
    run_select_layers(config, paths, progress_callback)
    run_condense(config, paths, progress_callback)
    run_eval(config, paths, "pretrained", progress_callback)
    run_eval(config, paths, "condensed", progress_callback)
    run_sweep(config, paths, progress_callback)
    if config.sft.steps > 0:
        run_sft(config, paths, progress_callback)
        run_eval(config, paths, "sft", progress_callback)
    return run_report(config, paths, progress_callback)


STAGE_FUNCTIONS = {
    "pretrain": run_pretrain,
    "calibrate": run_calibrate,
    "select-experts": run_select_experts,
    "select-layers": run_select_layers,
    "condense": run_condense,
    "sft": run_sft,
    "eval": run_eval,
    "sweep": run_sweep,
    "report": run_report,
    "pipeline": run_pipeline,
}


def paths_for(config: RunConfig) -> RunPaths:
    """Run paths of the configured output directory."""
    return get_run_paths(config.out)
