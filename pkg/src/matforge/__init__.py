"""matforge: split-sum PBR shading, analytic material gradients, and a
multi-view UV material-decomposition pipeline on numpy."""

__version__ = "0.1.0"
