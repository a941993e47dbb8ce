"""Sparse-view Gaussian splatting: reconstruction, relevance masking and mesh export."""
