"""Neuron importance continual-learning lab."""
