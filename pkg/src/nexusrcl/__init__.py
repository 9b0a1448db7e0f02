"""Layer-aware root cause localization for microservice telemetry."""

__version__ = "0.1.0"
