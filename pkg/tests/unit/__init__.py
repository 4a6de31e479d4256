"""Unit tests for stream_tracker."""
