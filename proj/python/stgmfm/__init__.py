# SPDX-License-Identifier: Apache-2.0
"""Tri-branch spatio-temporal graph decoder for dry-electrode motor imagery EEG.

The heavy lifting lives in the C++ core; this package exposes the signal,
graph, and pipeline operations over numpy arrays and plain directories.
Pipeline functions accept flat dotted-key overrides (for example
``{"train.epochs": 40, "model.d": 16}``) matching the CLI config format.
"""

from ._stgmfm import (
    analytic_phase,
    bandpass,
    build_prior,
    cosine_lr,
    degree_normalize,
    dominant_periods,
    effective_adjacency,
    evaluate,
    featurize,
    finetune,
    gcn_layer,
    gradient_fidelity,
    metrics_from_confusion,
    plv_from_phases,
    rfft,
    rms_envelope,
    run_protocol,
    synth,
    train,
    window_count,
)

__all__ = [
    "analytic_phase",
    "bandpass",
    "build_prior",
    "cosine_lr",
    "degree_normalize",
    "dominant_periods",
    "effective_adjacency",
    "evaluate",
    "featurize",
    "finetune",
    "gcn_layer",
    "gradient_fidelity",
    "metrics_from_confusion",
    "plv_from_phases",
    "rfft",
    "rms_envelope",
    "run_protocol",
    "synth",
    "train",
    "window_count",
]

__version__ = "0.1.0"
