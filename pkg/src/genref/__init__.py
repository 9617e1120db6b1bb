"""genref: generation-refinement answer/rationale model, trained from scratch
on a synthetic grounded-QA world, with its evaluation metrics and a blinded
human-rating service."""

__version__ = "0.1.0"
