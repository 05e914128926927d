"""Neuron activation importance and the weight-level baseline importances"""
