"""
Synthetic scene collectors.
"""
