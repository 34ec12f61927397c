"""Logic-informed reinforcement learning for hybrid-action scheduling.

The package couples a latent-action policy with a feasibility projection
(assignment + Euclidean QP) and ships a reducer-assembly workcell simulator,
hierarchical baselines and an experiment harness around them.
"""

__version__ = "0.1.0"
