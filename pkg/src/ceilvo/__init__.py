"""Direct sparse visual odometry for ceiling-facing cameras."""

__version__ = "0.1.0"
