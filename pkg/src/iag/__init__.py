"""Input-aware backdoor attack on toy visual-grounding models."""
__version__ = "0.1.0"
