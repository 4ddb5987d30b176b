"""Cluster-wise source filtering for offline RL under a dynamics shift.

Pipeline: cluster target next states, route source transitions to their
nearest cluster, estimate per-cluster dynamics KL with domain classifiers,
admit source data tier by tier, then train weighted IQL critics and a
behavior-regularised actor.
"""

from .data import Dataset, Domain, Transition, load_dataset, save_dataset
from .policy import LodadaConfig, run_lodada

__all__ = ["Dataset", "Domain", "Transition", "LodadaConfig", "load_dataset", "run_lodada",
           "save_dataset"]
__version__ = "0.1.0"
