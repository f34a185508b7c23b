"""Distraction-robust latent world-model RL.

A world model with a recurrent state-space core is trained without pixel
reconstruction: representation learning uses a negative-free siamese loss on
two randomly shifted views, dynamics regularization uses a KL term whose
weight grows exponentially over training up to a cap, and a cross inverse
dynamics head injects action information. Policies are learned by actor-critic
on imagined latent rollouts. A reconstruction-based variant of the objective
is kept for ablations and for the gradient-alignment diagnostic, and a small
verification suite checks the underlying information-theoretic bounds by
exact enumeration on discrete distributions.
"""

__version__ = "0.1.0"
