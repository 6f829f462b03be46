"""Random-source inverse scattering for the biharmonic Schroedinger operator."""
__version__ = "0.1.0"

from .exceptions import *  # noqa: F401,F403
from .grid import (Field, GridSpec, SpectralMultiplier, apply_multiplier, nudft_point,  # noqa: F401
                   read_field, spectral_transform, write_field)
from .kernels import biharmonic_kernel, hankel_h0, helmholtz_kernel  # noqa: F401
