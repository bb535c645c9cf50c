"""Black-box adversarial attacks on network-wide multi-step traffic forecasters."""

__version__ = "0.1.0"
