"""Similarity-learning embedding networks trained class-incrementally.

Subpackages cover a small autograd core, IDX datasets, the embedding CNN,
pair/triplet miners and losses, five incremental strategies, retrieval
evaluation, and an experiment harness with a command-line front end.
"""

__version__ = "0.1.0"
