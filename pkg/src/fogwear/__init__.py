"""Fog-assisted wearable telemetry: glove simulation, Trickle mesh, fog gateway,
cloud sink and benchmark harness."""

__version__ = "0.1.0"
