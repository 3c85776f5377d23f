"""Scene-graph guided multi-object search: simulator, policy, training, evaluation."""

__version__ = "0.1.0"
