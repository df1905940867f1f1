"""Grid traffic-movie forecasting with a dense-block U-Net on a small numpy autodiff core."""

__version__ = "0.1.0"
