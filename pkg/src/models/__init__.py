"""
Domain types: activity cubes, detection results, run configuration, errors
and CLI result documents.
"""
