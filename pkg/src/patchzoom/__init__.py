"""Budgeted patch selection for gigapixel slide classification on synthetic feature bags."""
__version__ = "0.1.0"
