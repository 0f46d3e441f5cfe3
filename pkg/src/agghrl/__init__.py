"""Two-level reinforcement learning for aggregating search results from a
core source and several vertical sources into one result page."""

__version__ = "0.1.0"
