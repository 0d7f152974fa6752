"""Task-informed meta-learning: MAML with FiLM task embeddings and forgetful task scheduling."""

__version__ = "0.1.0"
