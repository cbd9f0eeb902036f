"""
Evaluation metrics and the ablation runner.
"""
