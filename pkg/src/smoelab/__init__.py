"""Desk-scale sparse mixture-of-experts toolkit.

Implements baseline softmax-TopK routing plus similarity-aware and
attention-aware score mixing, with exact probabilistic oracles, routing
stability metrics, and a tiny deterministic training harness.
"""

__version__ = "0.1.0"
