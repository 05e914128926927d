"""Tensor engine: forward/backward primitives, layers and the Adam optimizer"""
