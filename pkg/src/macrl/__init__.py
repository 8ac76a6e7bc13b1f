"""macrl: macro-action multi-agent RL with instruction interruptions."""

__version__ = "0.1.0"
