"""GP-imputed multimodal transformer for MS progression prediction."""

__version__ = "0.1.0"
