"""Under-frequency load-shedding design toolkit.

Static network analysis (grid), nonlinear time-domain simulation with relays
(simulate), reduced-order frequency models (reduction), MILP setpoint
optimization (milp, solvers, shed_opt), and the end-to-end pipeline
(pipeline, cli).
"""

__version__ = "0.1.0"
