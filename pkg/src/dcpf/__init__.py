"""Discrete compound Poisson factorization for sparse count matrices."""

from dcpf.element_dist import ElementDistribution
from dcpf.sparse_data import SparseCountMatrix, load_triplets, save_triplets

__version__ = "0.1.0"
