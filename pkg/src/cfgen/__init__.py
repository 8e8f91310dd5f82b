"""Counterfactual data augmentation toolkit.

Retrieves label-flipping excerpts from a task-related corpus with a
trained bi-encoder, turns them into keyword constraints for a few-shot
LLM editor, and scores the generated counterfactuals with an intrinsic
metric suite (self-BLEU, normalized Levenshtein, token-label bias
z-statistics, perturbation typing). Includes an annotation HTTP service
for human-in-the-loop counterfactual authoring.
"""

__version__ = "0.1.0"
