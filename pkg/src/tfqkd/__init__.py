"""Three-time-bin plug-and-play twin-field QKD simulator."""
__version__ = "0.1.0"
