"""Integration tests for stream_tracker."""
