"""Experiment orchestration, metrics, reports and the gradient check"""
