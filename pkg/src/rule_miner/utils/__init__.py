"""Utility modules for the rule miner."""
