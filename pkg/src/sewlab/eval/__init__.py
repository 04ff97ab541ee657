from sewlab.eval.metrics import cda, wacc

__all__ = ["cda", "wacc"]
