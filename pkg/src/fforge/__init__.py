"""Few-shot classification by self-augmentation, on a small numpy autodiff engine.

Modules: ``tensor`` (autodiff), ``augment`` (regional dropout), ``backbone``
(branched conv net), ``trainer``, ``episodes`` (n-way k-shot evaluation),
``lrl`` (per-episode fine-tuning), ``data`` (containers and synthetic data)
and ``cli``.
"""

__version__ = "0.1.0"
