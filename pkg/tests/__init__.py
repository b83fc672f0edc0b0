"""Test package for ISS RNN."""
