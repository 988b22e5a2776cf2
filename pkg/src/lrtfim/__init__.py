"""Long-range transverse-field Ising chains: quench dynamics, thermal ensembles and classical criticality."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CapabilityError,
    ConfigError,
    ConvergenceError,
    FitError,
    InvalidParameterError,
    InvalidSizeError,
    LrtfimError,
    NearResonanceError,
    SizeMismatchError,
    UnsupportedModelError,
    ZigzagInstabilityError,
)
from .model import (  # noqa: E402
    CouplingMatrix,
    ModelSpec,
    ProductState,
    build_ideal_couplings,
    build_unnormalized_couplings,
    kac_normalization,
    kac_rescale,
    product_state_energy,
    product_state_energy_variance,
    select_initial_states,
)
