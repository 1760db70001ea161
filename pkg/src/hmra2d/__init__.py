"""Heterogeneous multi-reference alignment of 2-D images by invariant features."""

import logging

__version__ = "0.1.0"

logging.getLogger(__name__).addHandler(logging.NullHandler())
