"""Tightly coupled RTK/INS/stereo-vision fusion with innovation-based GNSS quality control."""
