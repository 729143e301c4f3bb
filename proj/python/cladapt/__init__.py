"""Continual adaptation experiments on a synthetic two-domain multi-label benchmark."""

from ._cladapt import (
    LABEL_COUNT,
    ConfigError,
    IntegrityError,
    Model,
    NumericError,
    ShapeError,
    auc_table,
    default_config,
    domain_labels,
    ewc_penalty,
    fisher_diagonal,
    generate,
    label_name,
    lwf_loss,
    masked_bce,
    roc_auc,
    run_experiment,
    shared_labels,
)

__all__ = [
    "LABEL_COUNT",
    "ConfigError",
    "IntegrityError",
    "Model",
    "NumericError",
    "ShapeError",
    "auc_table",
    "default_config",
    "domain_labels",
    "ewc_penalty",
    "fisher_diagonal",
    "generate",
    "label_name",
    "lwf_loss",
    "masked_bce",
    "roc_auc",
    "run_experiment",
    "shared_labels",
]
