"""Forest / non-forest segmentation of bistatic SAR rasters with small fully convolutional networks.

Modules: ``core`` (tensors and reverse-mode gradients), ``models`` (residual
and densely connected 7-layer stacks), ``losses``, ``optim`` (ADAM),
``data`` (tile containers, splits, synthetic scenes), ``evaluation``
(threshold calibration and metrics), ``checkpoint``, ``train`` and ``cli``.
"""
__version__ = "0.1.0"
