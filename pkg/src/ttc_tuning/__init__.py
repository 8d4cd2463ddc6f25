"""Two-stage parameter-efficient tuning: LayerNorm alignment, then task-relevant channels."""

__version__ = "0.1.0"
