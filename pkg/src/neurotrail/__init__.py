"""Trinary-weight spiking CNN pipeline: train, compile to crossbar cores,
simulate, and drive a differential-drive robot over a TCP spike protocol."""

__version__ = "0.1.0"
