"""Desk-scale platform-as-a-service middleware: node containers, a master
scheduler, pluggable programming models, hourly-billed provisioning and
per-minute usage accounting."""

__version__ = "0.1.0"
