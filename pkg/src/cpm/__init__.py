"""Contrastive positive mining for unsupervised skeleton action representations.

Modules: ``autodiff`` (numpy reverse-mode engine), ``data`` (sequences,
synthetic generator, container files), ``augment``, ``model`` (graph
encoder and heads), ``contrastive`` (queue, distributions, mining),
``trainer``, ``evaluation``, ``ablation`` and ``cli``.
"""

__version__ = "0.1.0"
