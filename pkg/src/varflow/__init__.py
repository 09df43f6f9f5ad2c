"""Non-autoregressive TTS with normalizing-flow pitch and energy modeling."""

__version__ = "0.1.0"
