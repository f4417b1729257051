"""Desk-scale LiDAR car detection with a simulated int8 edge accelerator.

Pipeline: pillar encoding (CPU) -> backbone + head (float reference or
compiled int8 accelerator simulation) -> decode/NMS (CPU) -> evaluation.
"""

__version__ = "0.1.0"
