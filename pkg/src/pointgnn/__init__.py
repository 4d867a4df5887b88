"""Point-cloud object detection with a graph neural network."""

__version__ = "0.1.0"
