"""MixerCSeg: hybrid SSM / attention / convolution crack segmentation in numpy."""

__version__ = "0.1.0"
