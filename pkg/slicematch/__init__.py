# Dense shape correspondence from functional maps and sliced optimal transport.

__version__ = "0.1.0"
