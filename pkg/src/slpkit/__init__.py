"""Symbol-level precoding toolkit.

Exact constructive-interference precoders (zero-forcing and MMSE flavors,
plus a robust variant under channel aging) built on an active-set NNLS
solver, and low-complexity learned counterparts built on permutation-
equivariant networks with a small reverse-mode autodiff engine.
"""

__version__ = "0.1.0"
