"""Test suite for malmm-py."""
