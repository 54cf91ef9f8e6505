"""Few-shot tabular classification with LLM-derived priors."""
__version__ = "0.1.0"
