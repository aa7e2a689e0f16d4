"""Numerical area and coarea formulas on Carnot groups."""
