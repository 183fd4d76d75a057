"""NB-IoT NPRACH uplink synchronization over LEO channels by change point detection of phase series."""

__version__ = "0.1.0"
