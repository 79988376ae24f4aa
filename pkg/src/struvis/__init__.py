"""Thinking with structured vision: state model, rewards, GRPO/SFT and the CoT data pipeline."""

__version__ = "0.1.0"
