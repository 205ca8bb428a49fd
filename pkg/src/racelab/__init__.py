"""Desk-scale racing imitation pipeline.

A closed-track 2D racing simulator, a scripted expert demonstrator, a
from-scratch autodiff core, a causal-transformer base policy trained by
behavior cloning, and a residual Gaussian policy fine-tuned by adversarial
imitation with soft actor-critic. The command line entry point is
``racelab`` (see ``racelab.cli``).
"""

__version__ = "0.1.0"
