"""Desk-scale open-set detection lab: contrastive feature learning with a
class-balanced memory bank, unknown-probability learning, and open-set
detection metrics."""

__version__ = "0.1.0"
