"""Hybrid monocular-vision collision avoidance for a small UAV.

A deterministic 2D obstacle-course simulator with a synthetic camera, three
trainable networks (depth, Q-policy, collision prediction), two contingency
pilots (expert rules and an A* planner), an arbitration state machine and an
evaluation harness.
"""

__version__ = "0.1.0"
