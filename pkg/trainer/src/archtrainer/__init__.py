"""Reference trainer speaking the evaluation wire protocol over stdio."""

__version__ = "0.1.0"
