"""Paired TCP vs. TCP-over-UDP measurements for detecting differential treatment."""

__version__ = "0.1.0"
