"""Throughput-maximizing LLM inference scheduling under a latency bound."""

__version__ = "0.1.0"
