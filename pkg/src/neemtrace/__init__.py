"""Deterministic episodic tracing, content-addressed storage and auditing
for robot task executions."""

__version__ = "0.1.0"
