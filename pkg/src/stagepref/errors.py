"""Exception types shared across the package.

Parameter validation failures raise plain ValueError; the classes here mark
conditions that are data-dependent rather than caller mistakes.
"""


class StageprefError(Exception):
    pass


class DegenerateScaleError(StageprefError):
    """Reward normalization is undefined because the scale interval collapsed."""


class NumericalError(StageprefError):
    """A linear solve or matrix inverse failed its residual check."""


class SelectionError(StageprefError):
    """A candidate batch cannot be scored (e.g. every distance is infinite)."""
