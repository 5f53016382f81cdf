"""glasseg: desk-scale glass segmentation with a dual-backbone encoder.

A trainable hierarchical encoder and a frozen general-purpose patch
transformer feed per-scale squeeze-and-excitation channel-reduction fusion;
a query-based mask decoder turns the fused pyramid into per-pixel glass
confidence.  Everything runs on NumPy with a small built-in autodiff engine.
"""

__version__ = "0.1.0"
