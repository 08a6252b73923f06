"""Video segmentation with a convolutional GRU memory over two-stream features.

numpy implementation with hand-written gradients, a synthetic moving-shapes
data generator, evaluation measures, and a command-line driver (``vismem``).
"""
__version__ = "0.1.0"
