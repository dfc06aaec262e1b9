"""Grouped causal representation learning.

Simulators for grouped causally-structured latent variables, group-wise
nonlinear observation models, a contrastive estimator that recovers the
latents and the inter-group causal graph from observations alone, and the
evaluation protocol that scores both.
"""

__version__ = "0.1.0"
