"""
Logging, artifact I/O, geodesy and worker helpers.
"""
