"""Migration systems as masked nonnegative CP components of flow tensors."""

__version__ = "0.1.0"
