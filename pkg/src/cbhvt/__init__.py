"""Channel-boosted hybrid CNN/transformer detector for lymphocyte images."""

__version__ = "0.1.0"
