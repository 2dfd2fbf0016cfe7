"""Synthetic scenarios, end-to-end runner, reports and CLI."""
