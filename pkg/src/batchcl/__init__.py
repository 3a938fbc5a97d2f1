"""Desk-scale distributed continual learning.

Experts are trained in parallel on disjoint incremental tasks, each
regularized toward the shared base model, and then distilled back into
the base in one batched consolidation pass per step. Everything runs on
numpy; the point is faithful algorithmics and byte-exact cost accounting,
not throughput.
"""

__version__ = "0.1.0"
