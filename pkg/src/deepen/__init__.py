"""Maximum-likelihood trained posterior energies for undersampled multicoil Fourier imaging."""

__version__ = "0.1.0"
