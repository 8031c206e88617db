"""Few-shot synthesis workbench for arithmetic where ``+`` binds tighter than ``*``."""

__version__ = "0.1.0"
