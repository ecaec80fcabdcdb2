"""Test-time repair of adversarial images with self-supervised losses."""

__version__ = "0.1.0"
