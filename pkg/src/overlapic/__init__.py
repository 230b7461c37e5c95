"""Pilot-aided detection over Gauss-Markov fading with overlapping-spectrum interference.

Submodules:

* :mod:`overlapic.waveform` - pulse shapes and interference coefficients
* :mod:`overlapic.channel` - fading channel and frame synthesis
* :mod:`overlapic.estimator` - joint channel / interference estimation from pilots
* :mod:`overlapic.detector` - S-MAP, I-MAP, ODD, nearest-pilot and iterative detectors
* :mod:`overlapic.analysis` - error floors, SER and throughput models
* :mod:`overlapic.harness` - Monte Carlo sweeps and result export
"""
from .errors import *  # noqa: F401,F403
from .waveform import (AlignmentConfig, EicVector, InterferenceSource, PulseShape,
                       build_interference_matrix, compute_eic, eval_pulse, synthesize_interference)
from .channel import (QPSK, ChannelTrace, FadingParams, FrameLayout, FrameObservation,
                      evolve_channel, generate_frame, nearest_qpsk_index, qpsk_symbols,
                      synthesize_observations)
from .estimator import (EstimationOutput, EstimatorWorkspace, build_workspace, estimate_eic_per_pilot,
                        estimate_frame, estimate_reference, residual_power)
from .detector import (DetectedFrame, DetectionInterval, IterativeResult, PilotGrid, imap_detect,
                       iterative_detect, nearest_pilot_detect, odd_detect, smap_detect, smap_score)
from .analysis import (ThroughputModel, cee_decomposition, equivalent_snr, optimize_pilot_density,
                       predict_floors, qpsk_symbol_error, ser_curve, throughput)
from .harness import ExperimentConfig, MetricTable, emit_outputs, replay_row, run_sweep

__version__ = "0.1.0"
