"""Mixed-frequency GDP nowcasting with dynamic factor models and neural CDEs."""

__version__ = "0.1.0"
