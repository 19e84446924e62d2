"""Contextual attention for hand detection: autodiff core, attention module, orientation loss, annotation heuristics, evaluation and a toy detector."""
