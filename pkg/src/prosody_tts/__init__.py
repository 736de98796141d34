"""Multi-speaker multi-style TTS with an explicit phone-level prosody bottleneck."""

__version__ = "0.1.0"
