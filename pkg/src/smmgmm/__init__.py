"""GMM estimation of additive, multiplicative and double-logistic structural
mean models with multiple instrumental variables."""

__version__ = "0.1.0"

from .data import Dataset, InstrumentSpec, encode_indicators, ingest_csv, make_dataset
from .errors import SmmError
from .estimator import (GmmFit, fit_2sgmm_logistic, fit_2sls_additive, fit_named, fit_one_step,
                        fit_two_step, hansen_j)
from .late import decompose
from .moments import MomentData, build_model
from .simulate import SimDesign, run_replications

__all__ = [
    "Dataset", "InstrumentSpec", "encode_indicators", "ingest_csv", "make_dataset", "SmmError",
    "GmmFit", "fit_one_step", "fit_two_step", "fit_2sls_additive", "fit_2sgmm_logistic",
    "fit_named", "hansen_j", "decompose", "MomentData", "build_model", "SimDesign",
    "run_replications",
]
