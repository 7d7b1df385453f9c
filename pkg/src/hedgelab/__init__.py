"""Deep-hedging laboratory: pricing, TD3 hedging, walk-forward backtests and symbolic distillation."""

__version__ = "0.1.0"
