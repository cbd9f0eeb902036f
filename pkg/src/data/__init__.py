"""
Synthetic scene generation, frame storage and preprocessing.
"""
