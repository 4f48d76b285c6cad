"""Wireless control over lossy Markov channels: channel abstraction, MJLS stability and LQ synthesis."""

__version__ = "0.1.0"
