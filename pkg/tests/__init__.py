"""Tests package for the DFL toolkit."""
