"""Multi-modal volume classifier: CNN patch features fused by a transformer.

Subpackages are imported lazily by the CLI so that thread limits can be
configured before numpy loads; import submodules directly in library use.
"""

__version__ = "0.1.0"
