"""Backflash side-channel simulator for polarization-encoding QKD receivers."""
from .analysis import (RMatrix, detect_peaks, estimate_pb, expected_leakage, key_rate,
                       observed_leakage, worst_case_tag_fraction)
from .config import ConfigError, load_config, read_config
from .devices import ApdParams, Cause, per_electron_probability
from .eavesdropper import EveSetup, angle_scan, gate_coincidences
from .engine import EventLog, ScenarioConfig, run_scenario
from .optics import JonesVector, PbsSpec, pbs_project
from .receiver import ReceiverModel

__version__ = "0.1.0"
