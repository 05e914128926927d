"""Multi-head network construction and checkpoints"""
