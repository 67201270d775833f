"""Open-set semi-supervised detection toolkit: class-balanced foreground
pasting, unknown-label fusion, mean-teacher machinery and AP evaluation."""

__version__ = "0.1.0"
