"""Multimodal 3D anomaly detection: geometry, fusion, memory banks and decision heads."""

from ._core import (
    DecisionHead,
    Error,
    aupro,
    auroc,
    coreset,
    farthest_point_sampling,
    fit_plane,
    infonce_loss,
    interpolate,
    ocsvm_train,
    phi_score,
    psi_map,
    read_tensor,
    run,
    upsample_smooth,
    write_tensor,
)

__all__ = [
    "DecisionHead",
    "Error",
    "aupro",
    "auroc",
    "coreset",
    "farthest_point_sampling",
    "fit_plane",
    "infonce_loss",
    "interpolate",
    "ocsvm_train",
    "phi_score",
    "psi_map",
    "read_tensor",
    "run",
    "upsample_smooth",
    "write_tensor",
]
