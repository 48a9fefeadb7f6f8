"""Layer-separated training of softmax cross-entropy classifiers.

Fully connected and convolutional networks are trained either by plain
gradient descent on the cross-entropy loss or by alternating minimization
of a layer-separated surrogate that carries one auxiliary matrix per hidden
layer.
"""

__version__ = "0.1.0"
