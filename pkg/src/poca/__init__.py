"""Pyramid-of-captions toolkit.

Three layers live here:

* a latent-semantic simulator (``poca.semantic``, ``poca.info``,
  ``poca.theory``) that checks, numerically, when merging local and
  global captions is guaranteed to reduce semantic error;
* a backend-agnostic captioning pipeline (``poca.pipeline``,
  ``poca.backends``, ``poca.prompts``) that splits images into
  positional patches, captions them, and merges the captions with a
  chat model;
* caption-quality evaluation (``poca.evaluation``) and a CLI
  (``poca.cli``) tying the pieces together.
"""

__version__ = "0.1.0"
