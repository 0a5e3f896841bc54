"""Piezo bimorph actuator: beam model, bearing fit, banded amplitude tables."""

from .fit import (
    BearingFit,
    EmptyInput,
    FrequencyResponse,
    InsufficientData,
    NoConvergence,
    fit_bearing,
    fit_residual,
    median_params,
    synthesize,
)
from .model import (
    DEFAULT_BEARING,
    NO_LOAD,
    ActuatorConfig,
    ActuatorError,
    BearingParams,
    BimorphGeometry,
    MaxwellLoad,
    SingularBoundary,
    first_resonance,
    load_config,
    save_config,
    static_tip,
    tip_response,
    tip_response_complex,
    transfer_matrix,
)
from .table import (
    BANDS,
    PUBLISHED,
    AmplitudeTable,
    amplitude_table,
    band_maxima,
    calibrated_config,
    calibration_targets,
    config_table,
    consistent_interval,
)

__all__ = [name for name in dir() if not name.startswith("_")]
