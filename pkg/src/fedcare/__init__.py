"""fedcare: a desk-scale privacy-preserving clinical QoL platform.

Hospitals run edge nodes that train quality-of-life models locally and
collaborate through a cloud coordinator via federated averaging and
homomorphically encrypted learning; predictions are explained with Shapley
attributions and surrogate models, and a clinician dashboard explores
what-if interventions.
"""

__version__ = "0.1.0"
