"""Multi-platform ride-hailing market simulator with DDPG / pi-DDPG acceptance control."""
__version__ = "0.1.0"
