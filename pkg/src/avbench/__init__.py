"""Robustness benchmark for active vision pipelines on synthetic shapes.

Pure-numpy models, white/black-box perturbation attacks, glance-and-focus
and fixation-based recognizers, and the downsampling transfer protocol.
"""

__version__ = "0.1.0"
