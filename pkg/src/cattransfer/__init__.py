"""Cross-dataset detection transfer on synthetic region features.

A fully-supervised and a weakly-supervised student share knowledge through
an EMA teacher; a small GCN over category co-occurrence graphs injects
semantic features into the students.  Everything runs on numpy with the
reverse-mode autodiff in :mod:`cattransfer.autodiff`.
"""

__version__ = "0.1.0"
