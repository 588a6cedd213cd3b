"""Concept-graph denoising recommender: tripartite graph construction,
three-phase attention/GRU model with differentiable neighbor selection,
training, evaluation, and explainability export."""

__version__ = "0.1.0"
