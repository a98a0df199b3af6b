"""Desk-scale preference-alignment toolkit.

Implements contrastive cross-prompt preference losses with embedding-distance,
uniform, and diagonal weighting, alongside DPO/IPO/KTO baselines, a minimal
byte-level autoregressive LM with exact gradients, a synthetic ground-truth
benchmark, and a train/evaluate/ablate pipeline.
"""

__version__ = "0.1.0"
