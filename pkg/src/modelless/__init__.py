"""Model-less inference serving: variant catalog, selection, autoscaling and a
discrete-event cluster simulator."""

__version__ = "0.1.0"
