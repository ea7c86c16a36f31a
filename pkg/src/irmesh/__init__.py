"""Integrated residual transcription with adaptive h-mesh refinement."""
