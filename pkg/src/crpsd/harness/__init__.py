"""Batch command-line harness."""
