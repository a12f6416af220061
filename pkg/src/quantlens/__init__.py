"""Desk-scale laboratory for post-training quantization failure analysis.

Trains a small factual-recall transformer, quantizes it at several bit
widths, and runs metric and causal-intervention suites that separate
recoverable signal loss from unrecoverable computation collapse.
"""

__version__ = "0.1.0"
