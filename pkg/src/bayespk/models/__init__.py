"""Built-in statistical models, selectable by name."""
from __future__ import annotations

from .base import (ConstraintSpec, ConstraintViolation, ModelData, ModelDef, ParamBlock,
                   allometric_scale, ka_lower_bound)
from .fk import FKModel, FKParams, fk_full_rhs, fk_pd_rhs
from .population import TwoCptPopModel
from .twocpt import OneCptModel, TwoCptModel

MODELS = {
    "twocpt": TwoCptModel,
    "onecpt": OneCptModel,
    "twocpt_pop": TwoCptPopModel,
    "fk": FKModel,
    "fk_pkpd": FKModel,
}


def get_model(name: str, **kwargs) -> ModelDef:
    """Instantiate a built-in model; keyword arguments go to its constructor."""
    try:
        cls = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return cls(**kwargs)


__all__ = [
    "ConstraintSpec", "ConstraintViolation", "ModelData", "ModelDef", "ParamBlock",
    "allometric_scale", "ka_lower_bound", "FKModel", "FKParams", "fk_full_rhs", "fk_pd_rhs",
    "TwoCptPopModel", "OneCptModel", "TwoCptModel", "MODELS", "get_model",
]
