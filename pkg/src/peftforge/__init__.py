"""Two-step parameter-efficient fine-tuning on a small decoder-only transformer.

A frozen base model plus small trainable adapters: a domain adapter trained
with a language-modelling objective, composed with a downstream adapter and
classifier head trained on classification tasks. Ships with its own autodiff
tensor core, five adapter families, a trainer, AUROC/perplexity metrics, a
grid Bayesian-optimization sweeper, synthetic data generators, a binary
checkpoint container, and a CLI.
"""

__version__ = "0.1.0"
