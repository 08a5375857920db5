"""Desk-scale engine for sharded expression storage, stratified cohort
retrieval, signaling-graph assembly, masked-edge graph pretraining, and
interpretable core-subgraph inference."""

__version__ = "0.1.0"
