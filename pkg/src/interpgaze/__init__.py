"""interpgaze: controllable gaze redirection and continuous interpolation on eye patches."""

__version__ = "0.1.0"
