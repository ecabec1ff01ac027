"""Similarity-scaled message passing for node classification, plus a small
coupling-flow graph generator, on a self-contained numpy autodiff."""

__version__ = "0.1.0"
