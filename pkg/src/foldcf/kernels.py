"""Backend selection for the chain-growth kernel.

The compiled extension is used when it imports; otherwise, or when
``FOLDCF_PURE_PYTHON`` is set to a non-empty value, the numpy version is used.
Both are importable directly for comparison.
"""
import os

from . import _chain_py as python_impl

try:
    from . import _chain_ext as compiled_impl
except ImportError:  # extension not built
    compiled_impl = None

if compiled_impl is not None and not os.environ.get("FOLDCF_PURE_PYTHON"):
    BACKEND = "cython"
    chain_forward = compiled_impl.chain_forward
    chain_backward = compiled_impl.chain_backward
else:
    BACKEND = "python"
    chain_forward = python_impl.chain_forward
    chain_backward = python_impl.chain_backward
