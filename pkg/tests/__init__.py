"""
Test suite for urbanpulse.
"""
