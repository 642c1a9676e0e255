"""Test package for joint model modules."""
