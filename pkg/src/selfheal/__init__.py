"""Self-healing workload manager for concurrent LLM training tasks."""

__version__ = "0.1.0"
