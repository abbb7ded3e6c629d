"""Masked micro-patch autoencoder with Monte Carlo mask-ensemble uncertainty
for Doppler-lidar vertical-velocity time-height fields."""

__version__ = "0.1.0"
