"""Two-scale freeze-thaw and sap-exudation simulation for sapwood stems."""

__version__ = "0.1.0"
