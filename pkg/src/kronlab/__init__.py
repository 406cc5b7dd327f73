"""Kronecker-product view of graph-convolution dynamics.

Modules: ``linalg`` (Jacobi eigensolver, SVD, Kronecker helpers), ``graph``
(graphs and aggregation operators), ``dynamics`` (rollouts, energies and
subspace probes), ``skp`` (sums of Kronecker products), ``training``
(KP / softmax-SKP / SKP models with manual gradients and Adam),
``experiments`` and ``cli``.
"""

__version__ = "0.1.0"
