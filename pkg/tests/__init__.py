"""Test suite for the neuron importance lab."""
