"""Uncertainty-driven online grasp learning on a synthetic bin.

Modules:
    sim: seeded bin simulator with a hidden grasp-success model.
    net: per-pixel MLPs with explicit gradients and Adam.
    critic_mv, critic_qr: mean-variance and quantile critics with
        ensemble uncertainty decomposition.
    actor: Gaussian actor, UCB scoring and pixel selection.
    pipeline: offline pretraining and the online actor/learner loop.
    cli: the ``graspucb`` command-line harness.
"""

__version__ = "0.1.0"
