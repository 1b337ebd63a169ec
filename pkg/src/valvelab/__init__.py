"""Throttle-valve control laboratory.

Simulated hysteretic valves, classical PI tuning from identified models,
and two reinforcement-learning controllers (plain actor-critic and a
PI-guided variant), plus an evaluation harness and CLI.
"""

__version__ = "0.1.0"
