"""LangGraph workflow running the policy ablation matrix against one shared backbone."""
from __future__ import annotations

import logging
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, TypedDict

import numpy as np
import pandas as pd
from langgraph.graph import END, START, StateGraph

from ..config import InferMode

logger = logging.getLogger(__name__)

StateDict = Dict[str, np.ndarray]

DEFAULT_VARIANTS = ("full", "l1", "B", "P", "exit")
# variants that reuse another variant's trained policy and only change inference
INFERENCE_ONLY = {"exit": "full"}
TABLE_COLUMNS = ["variant", "mode", "r", "n", "epe_mean", "f1_all", "updates_mean", "flops_mean"]


class AblationState(TypedDict, total=False):
    """Shared state flowing through the ablation workflow."""

    variants: List[str]
    backbone_state: StateDict
    policy_states: Dict[str, StateDict]
    rows: List[Dict[str, Any]]
    table: pd.DataFrame


BackboneTrainer = Callable[[], StateDict]
PolicyTrainer = Callable[[str, StateDict], StateDict]
Evaluator = Callable[[str, StateDict, InferMode], Mapping[str, Any]]


def inference_mode(variant: str) -> InferMode:
    return "exit" if variant == "exit" else "policy"


def build_ablation_workflow(
    *,
    train_backbone: BackboneTrainer,
    train_policy: PolicyTrainer,
    evaluate: Evaluator,
    variants: Optional[Sequence[str]] = None,
) -> Any:
    """Compile backbone → policies → evaluate → compare.

    ``evaluate(variant, state, mode)`` returns one summary row; the ``fixed``
    baseline row is evaluated on the shared backbone alone.
    """

    chosen = list(variants or DEFAULT_VARIANTS)

    def backbone_node(state: AblationState) -> AblationState:
        state["variants"] = state.get("variants") or chosen
        state["backbone_state"] = train_backbone()
        return state

    def policies_node(state: AblationState) -> AblationState:
        trained: Dict[str, StateDict] = {}
        for variant in state["variants"]:
            source = INFERENCE_ONLY.get(variant, variant)
            if source not in trained:
                logger.info("Training policy variant", extra={"variant": source})
                trained[source] = train_policy(source, state["backbone_state"])
            trained[variant] = trained[source]
        state["policy_states"] = trained
        return state

    def evaluate_node(state: AblationState) -> AblationState:
        rows = [dict(evaluate("fixed", state["backbone_state"], "fixed"), variant="fixed", mode="fixed")]
        for variant in state["variants"]:
            mode = inference_mode(variant)
            row = evaluate(variant, state["policy_states"][variant], mode)
            rows.append(dict(row, variant=variant, mode=mode))
        state["rows"] = rows
        return state

    def compare_node(state: AblationState) -> AblationState:
        state["table"] = pd.DataFrame(state["rows"], columns=TABLE_COLUMNS)
        return state

    graph: StateGraph = StateGraph(AblationState)
    graph.add_node("backbone", backbone_node)
    graph.add_node("policies", policies_node)
    graph.add_node("evaluate", evaluate_node)
    graph.add_node("compare", compare_node)

    graph.add_edge(START, "backbone")
    graph.add_edge("backbone", "policies")
    graph.add_edge("policies", "evaluate")
    graph.add_edge("evaluate", "compare")
    graph.add_edge("compare", END)

    return graph.compile()


__all__ = [
    "AblationState",
    "DEFAULT_VARIANTS",
    "TABLE_COLUMNS",
    "build_ablation_workflow",
    "inference_mode",
]
