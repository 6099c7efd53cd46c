"""Latency, load-stability and bridge-overhead measurements."""
