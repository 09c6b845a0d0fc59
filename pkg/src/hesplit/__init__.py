"""Split learning with homomorphically encrypted server-side layers."""

from __future__ import annotations

__version__ = "0.1.0"
