"""
End-to-end tests on the synthetic benchmark.
"""
