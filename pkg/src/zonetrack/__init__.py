"""Risk-aware multi-robot target tracking with uncertain danger zones.

Subpackages:

* ``chance``     -- Gaussian chance-constraint residuals and MC oracles
* ``estimation`` -- range/bearing sensing model and the target EKF
* ``planner``    -- per-step constrained control optimization + escape rule
* ``sim``        -- deterministic world simulation and risk metrics
* ``io``         -- scenario configs, run logs, and the command line
"""

__version__ = "0.1.0"
