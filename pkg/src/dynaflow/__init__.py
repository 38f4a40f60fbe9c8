"""Flow matching over action sequences with a differentiable simulator in the loop.

Sampled trajectories are rollouts of predicted actions, so every generated
state transition is dynamically admissible by construction.
"""

__version__ = "0.1.0"
