"""Kernel selection: compiled extension if importable, numpy otherwise.

Set ``TACTWIN_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernel

python_render_block = _kernel.render_block
compiled_render_block = None

if not os.environ.get("TACTWIN_PURE_PYTHON"):
    try:
        from ._dds_ext import render_block as compiled_render_block
    except ImportError:
        compiled_render_block = None

render_block = compiled_render_block or python_render_block
NAME = "compiled" if compiled_render_block is not None else "python"
