"""Nested, anytime-valid prediction sets across the exits of an early-exit network."""
from .bayes import ExitPosterior, empirical_bayes, fit_posterior, kl_posterior_update, miscoverage_bound, predictive
from .classification import ThresholdSchedule, calibrate_taus, run_classification
from .errors import FormatError, InvalidArgument, NumericalError, SingularDesignError, TrainingDiverged
from .regression import PredictionInterval, run_multisample, run_parallel, run_sequence, solve_interval

__version__ = "0.1.0"
