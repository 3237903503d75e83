"""Pointer-network slate re-ranking."""
