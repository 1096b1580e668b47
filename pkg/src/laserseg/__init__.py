"""Language-guided segmentation of voxel radiance fields by dense feature distillation.

Submodules: ``autodiff`` (reverse-mode engine), ``volume`` (grids and volume
rendering), ``attention`` (vanilla and low-rank transient-query attention,
adapter, FLOP model), ``semantics`` (relevance and losses), ``dataio`` (file
formats and the synthetic scene generator), ``trainer`` and ``cli``.
"""

__version__ = "0.1.0"
