"""JSON model files.

Floats are written with ``repr`` precision, keys are sorted and layout is
fixed, so parsing a file and writing it again reproduces it byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .basis import KnotVector, SplineBasis, UnitScaler
from .loss import Coefficients
from .penalty import PenaltySpec
from .solver import ModelFit

SCHEMA_VERSION = 1


@dataclass
class ModelFile:
    """A fitted model plus the data schema it was fitted on."""

    fit: ModelFit
    covariates: list
    response: str
    selection: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        fit = self.fit
        pen = fit.penalty
        return {
            "schema_version": SCHEMA_VERSION,
            "response": self.response,
            "covariates": list(self.covariates),
            "basis": {"order": fit.basis.order, "interior_knots": _floats(fit.basis.knots.interior)},
            "scaler": None
            if fit.scaler is None
            else {"lower": _floats(fit.scaler.lower), "upper": _floats(fit.scaler.upper)},
            "column_means": [_floats(row) for row in fit.column_means],
            "mu": float(fit.coef.mu),
            "beta": [_floats(row) for row in fit.coef.beta],
            "sigma2": float(fit.sigma2),
            "nu": float(fit.nu),
            "penalty": None if pen is None else {"kind": pen.kind, "lambda": float(pen.lam), "shape": pen.shape},
            "active_set": list(fit.active_set),
            "converged": bool(fit.converged),
            "degenerate": bool(fit.degenerate),
            "iterations": int(fit.iterations),
            "objective": _float_or_str(fit.objective),
            "inlier_share": float(fit.inlier_share),
            "selection": self.selection,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())


def _floats(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


def _float_or_str(x):
    x = float(x)
    return x if np.isfinite(x) else repr(x)


def from_dict(doc: dict) -> ModelFile:
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema version {version!r}")
    try:
        basis = SplineBasis(KnotVector(int(doc["basis"]["order"]), np.array(doc["basis"]["interior_knots"])))
        beta = np.array(doc["beta"], dtype=float).reshape(len(doc["covariates"]), basis.m)
        means = np.array(doc["column_means"], dtype=float).reshape(beta.shape)
        sc = doc["scaler"]
        scaler = None if sc is None else UnitScaler(np.array(sc["lower"]), np.array(sc["upper"]))
        pen = doc["penalty"]
        penalty = None if pen is None else PenaltySpec(pen["kind"], float(pen["lambda"]), pen["shape"])
        obj = float(doc["objective"])
        fit = ModelFit(
            coef=Coefficients(float(doc["mu"]), beta),
            sigma2=float(doc["sigma2"]),
            nu=float(doc["nu"]),
            penalty=penalty,
            basis=basis,
            column_means=means,
            converged=bool(doc["converged"]),
            iterations=int(doc["iterations"]),
            objective_trace=[obj],
            scaler=scaler,
            degenerate=bool(doc["degenerate"]),
            inlier_share=float(doc["inlier_share"]),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed model file: {exc}") from None
    if tuple(doc["active_set"]) != fit.active_set:
        raise ValueError("model file active set does not match its coefficients")
    return ModelFile(fit=fit, covariates=list(doc["covariates"]), response=str(doc["response"]), selection=doc["selection"])


def loads(text: str) -> ModelFile:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"model file is not valid JSON: {exc}") from None
    return from_dict(doc)


def load(path) -> ModelFile:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
