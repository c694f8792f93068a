"""bdrrn - block-information recursive residual network for compressed video enhancement."""
