"""JSON model artifacts: every fitted estimator round-trips through ``to_dict``/``from_dict``."""

from __future__ import annotations

import json
from pathlib import Path

ARTIFACT_FORMAT = "stdemand-model"
ARTIFACT_VERSION = 1


def estimator_classes() -> dict:
    from .baselines import MEDIC, NaiveKDE
    from .gmm import TimeVaryingGMM
    from .stkde import SpatioTemporalKDE
    from .warp import KernelWarpingKDE

    return {cls.method: cls for cls in (TimeVaryingGMM, SpatioTemporalKDE, KernelWarpingKDE, MEDIC, NaiveKDE)}


def make_estimator(method, **params):
    """Unfitted estimator for a method name (``gmm``, ``stkde``, ``warp``, ``medic``, ``naivekde``)."""
    classes = estimator_classes()
    if method not in classes:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(sorted(classes))}")
    return classes[method](**params)


def model_to_json(est) -> str:
    doc = {"format": ARTIFACT_FORMAT, "version": ARTIFACT_VERSION, **est.to_dict()}
    return json.dumps(doc, indent=1) + "\n"


def model_from_json(text):
    doc = json.loads(text)
    if doc.get("format") != ARTIFACT_FORMAT:
        raise ValueError("not a stdemand model artifact")
    if doc.get("version") != ARTIFACT_VERSION:
        raise ValueError(f"unsupported artifact version {doc.get('version')!r}")
    classes = estimator_classes()
    method = doc.get("method")
    if method not in classes:
        raise ValueError(f"artifact names unknown method {method!r}")
    return classes[method].from_dict(doc)


def save_model(est, path):
    path = Path(path)
    path.write_text(model_to_json(est), encoding="utf-8")
    return path


def load_model(path):
    """Rebuild a fitted estimator from :func:`save_model` output."""
    return model_from_json(Path(path).read_text(encoding="utf-8"))
