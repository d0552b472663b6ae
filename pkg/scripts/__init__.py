"""Stochastic particle flow filters, baselines and the experiment harness."""
import logging

logging.getLogger(__name__).addHandler(logging.NullHandler())
