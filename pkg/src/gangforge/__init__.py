"""Graph injection attacks against GNN-based fraud detectors."""
