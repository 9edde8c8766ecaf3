"""Desk-scale legal case retrieval engine.

Cases become text-attributed fact/issue graphs; a node-and-edge updating
attention encoder trained with a graph-contrastive objective ranks candidates
by representation similarity, with BM25 for hard-negative mining and
two-stage shortlisting.
"""

__version__ = "0.1.0"
