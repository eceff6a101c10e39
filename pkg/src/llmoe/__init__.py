"""LLM-routed mixture of experts for next-day stock direction and all-in/all-out backtests."""

__version__ = "0.1.0"
