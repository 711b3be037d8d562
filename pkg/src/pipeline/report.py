"""Run report: aggregates persisted artifacts into JSON and a plain-text summary."""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from core.path_utils import RunPaths
from core.selection import ExpertPlan, SelectionTrace, read_sweep_csv
from core.settings import RunConfig


@dataclass
class RunReport:
    """Cost, perplexities and selection results of one run.

    Every number is read back from an artifact in the run directory, so the
    report can be rebuilt at any time without recomputation.
    """

    variant: str
    cost: Dict[str, Any]
    perplexity: Dict[str, Optional[float]]
    expert_plan: Optional[Dict[str, Any]] = None
    layer_selection: Optional[Dict[str, Any]] = None
    sweep: List[Dict[str, Any]] = field(default_factory=list)
    sft: Optional[Dict[str, Any]] = None
    config_fingerprint: str = ""
    seed: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        """Human-readable summary of the run."""
        cost = self.cost
        lines = [
            f"variant: {self.variant}",
            f"seed: {self.seed}",
            f"config: {self.config_fingerprint[:16]}",
            "",
            "cost",
            f"  total params         {cost.get('total_params')}",
            f"  fixed gate scalars   {cost.get('fixed_gate_scalars')}",
            f"  active params/token  {cost.get('active_params_per_token')}",
            f"  memory ratio         {cost.get('memory_ratio', 0.0):.4f}",
            f"  flops/token          {cost.get('flops_per_token')}",
            f"  analytic speedup     {cost.get('speedup_estimate', 0.0):.4f}x",
        ]
        measured = cost.get("measured_tokens_per_second")
        if measured is not None:
            lines.append(f"  measured tokens/s    {measured:.1f}")
        lines += ["", "held-out perplexity"]
        for name, value in self.perplexity.items():
            shown = "-" if value is None else f"{value:.4f}"
            lines.append(f"  {name:<12} {shown}")
        if self.layer_selection:
            lines += [
                "",
                f"condensed layers ({self.layer_selection['method']}): "
                f"{self.layer_selection['chosen']}",
            ]
        if self.expert_plan:
            lines.append(f"expert plan ({self.expert_plan['method']}):")
            for index, keep in self.expert_plan["keep"].items():
                lines.append(f"  layer {index}: {keep}")
        if self.sweep:
            lines += ["", "layer  js            kl            ppl_delta"]
            for row in self.sweep:
                lines.append(
                    f"{row['layer_index']:<6} {row['js']:<13.6g} {row['kl']:<13.6g} "
                    f"{row['ppl_delta']:.6g}"
                )
        if self.sft:
            lines += [
                "",
                f"sft trainable fraction {self.sft['trainable_fraction']:.6f}",
            ]
        return "\n".join(lines) + "\n"


def _read(path: Path) -> Optional[Dict[str, Any]]:
    if not path.exists():
        return None
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def build_report(config: RunConfig, paths: RunPaths) -> RunReport:
    """Collect the run's evaluations, selections and sweep into one report."""
    evaluations = {
        name: _read(paths.evaluation(name)) for name in ("pretrained", "condensed", "sft")
    }
    final = next(
        (evaluations[name] for name in ("sft", "condensed", "pretrained") if evaluations[name]),
        None,
    )
    plan = ExpertPlan.load(paths.expert_plan).to_dict() if paths.expert_plan.exists() else None
    if plan:
        plan.pop("traces", None)
    layers = (
        SelectionTrace.load(paths.layer_selection).to_dict()
        if paths.layer_selection.exists()
        else None
    )
    sweep = (
        [asdict(row) for row in read_sweep_csv(paths.sweep_csv)] if paths.sweep_csv.exists() else []
    )
    return RunReport(
        variant=final["variant"] if final else "unknown",
        cost=final["cost"] if final else {},
        perplexity={
            name: (value["held_out_perplexity"] if value else None)
            for name, value in evaluations.items()
        },
        expert_plan=plan,
        layer_selection=layers,
        sweep=sweep,
        sft=_read(paths.evaluation("sft_training")),
        config_fingerprint=config.fingerprint,
        seed=config.seed,
    )


def write_report(report: RunReport, paths: RunPaths):
    """Write report.json and report.txt into the run directory."""
    paths.report_json.parent.mkdir(parents=True, exist_ok=True)
    paths.report_json.write_text(report.to_json(), encoding="utf-8")
    paths.report_text.write_text(report.to_text(), encoding="utf-8")
