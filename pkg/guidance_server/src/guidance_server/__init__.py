"""Reference score-guidance service (wire protocol v1)."""

__version__ = "0.1.0"
