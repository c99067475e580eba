"""Workflow builders for multi-stage experiments."""
from .ablation import AblationState, build_ablation_workflow

__all__ = ["AblationState", "build_ablation_workflow"]
