"""Desk-scale adversarial robustness laboratory.

Small vision classifiers built on an in-package autodiff engine, iterative
sign-gradient attacks with norm-ball projection, adversarial training, and
cross-architecture transfer evaluation, all reproducible from fixed seeds.
"""

__version__ = "0.1.0"

from . import attack, autodiff, data, evaluation, models, training  # noqa: F401
from .autodiff import Tensor  # noqa: F401
