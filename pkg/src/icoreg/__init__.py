"""Point-cloud registration with icosahedral-group equivariant descriptors and reduced-search RANSAC."""

__version__ = "0.1.0"
