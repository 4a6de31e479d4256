"""Test fixtures for stream_tracker."""
