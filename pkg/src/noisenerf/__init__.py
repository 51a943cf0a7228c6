"""Noise-based steganography in a tiny neural radiance field."""
