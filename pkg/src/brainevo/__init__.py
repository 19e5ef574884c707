"""Forecasting brain-graph evolution from baseline scans.

A template graph is built from an independent population, a graph GAN learns
to normalise any graph towards it, and testing subjects borrow the follow-up
graphs of the training subjects whose template residuals look most alike.
"""

__version__ = "0.1.0"
