"""Wave-packet parametrix toolkit for variable-metric Schrodinger evolution."""
from __future__ import annotations

__version__ = "0.1.0"
