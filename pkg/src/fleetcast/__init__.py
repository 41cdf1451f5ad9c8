"""Fleet-level probabilistic solar forecasts by copula aggregation and conformal calibration."""

__version__ = "0.1.0"
