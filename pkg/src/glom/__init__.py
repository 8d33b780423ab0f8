"""glom: CNN feature extraction plus kernel SVMs for glomerular hypercellularity images."""

__version__ = "0.1.0"
