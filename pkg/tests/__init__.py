"""
Test suite for jumplan.
"""
