"""Cell-free massive MIMO user-association simulator.

Implements a scalable user-association pipeline (received-power masking,
service-aware link quality, priority normalization, exact capacity-constrained
assignment) plus closed-form and Monte-Carlo evaluation of symbol error rate
and detection probability, with the unscalable all-to-all association as the
comparison baseline.
"""

from cfmimo.scenario import (
    Deployment,
    PathLossParams,
    ServiceMix,
    ServiceType,
    SystemConfig,
    ValidationError,
    generate_deployment,
    load_scenario,
)

__version__ = "0.1.0"

__all__ = [
    "Deployment",
    "PathLossParams",
    "ServiceMix",
    "ServiceType",
    "SystemConfig",
    "ValidationError",
    "generate_deployment",
    "load_scenario",
    "__version__",
]
