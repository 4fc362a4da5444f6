"""Source training, transferability check, residual training and online estimation.

Models are persisted as a single JSON document with a format version and a
SHA-256 checksum over the canonical payload.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cva as cva_mod
from .cva import CvaModel, LagSpec, Normalizer
from .dataset import BatteryRecord, DischargeCycle, fingerprint
from .errors import CorruptModel, InsufficientData, InvalidInput, NotTransferable, VersionError
from .monitor import (
    ControlLimitProfile,
    SimilarityVerdict,
    control_limit_profile,
    cycle_statistics,
    similarity_gate,
)
from .nn import GruConfig, GruNetwork, TrainConfig, residual_targets, train
from .sync import synchronize_battery, synchronize_cycle

FORMAT_VERSION = 1

DEFAULT_LAG = LagSpec(32, 32)
DEFAULT_BETA = 0.95
DEFAULT_WINDOW = 100


@dataclass(eq=False)
class SourceModel:
    reference_cycle: np.ndarray
    cva: CvaModel
    limits: ControlLimitProfile
    network: GruNetwork
    train_meta: dict

    @property
    def nominal_capacity(self) -> float:
        return self.train_meta["nominal_capacity"]


@dataclass(eq=False)
class TargetModel:
    source: SourceModel
    residual_network: GruNetwork
    target_id: str
    verdict: SimilarityVerdict
    train_meta: dict

    @property
    def nominal_capacity(self) -> float:
        return self.train_meta["nominal_capacity"]


@dataclass(frozen=True)
class CapacityEstimate:
    cycle_index: int
    source_component: float
    residual_component: float
    total: float
    soh: float


@dataclass(frozen=True, eq=False)
class Features:
    """Per-cycle network inputs, time-ascending, plus the raw projection."""

    cv_sequences: list
    rv_sequences: list
    projection: cva_mod.CvProjection


def extract_features(model: CvaModel, reference, cycles: Sequence[DischargeCycle]) -> Features:
    series = [synchronize_cycle(reference, c.voltage, c.cycle_index) for c in cycles]
    return features_from_series(model, series)


def features_from_series(model: CvaModel, series) -> Features:
    proj = cva_mod.transform(model, series)
    cvs, rvs = [], []
    for sl in proj.cycle_slices():
        # Hankel columns run from the latest anchor back; networks read forward in time
        cvs.append(proj.cv[:, sl][:, ::-1].T.copy())
        rvs.append(proj.rv[:, sl][:, ::-1].T.copy())
    return Features(cvs, rvs, proj)


def _profile(projection, beta) -> ControlLimitProfile:
    return control_limit_profile(cycle_statistics(projection), beta)


def train_source(
    battery: BatteryRecord,
    lag: LagSpec = DEFAULT_LAG,
    beta: float = DEFAULT_BETA,
    net_cfg: GruConfig | None = None,
    train_cfg: TrainConfig | None = None,
    retained: int | None = None,
) -> SourceModel:
    """Fit CVA and the source network on every cycle of ``battery``.

    Cycle 1 is the synchronization reference. ``net_cfg.input_dim`` is
    overwritten with the retained CV count found by the CVA fit.
    """
    net_cfg = net_cfg or GruConfig(input_dim=1)
    train_cfg = train_cfg or TrainConfig()
    reference = battery.cycles[0].voltage
    if len(reference) < lag.window:
        raise InsufficientData(f"reference cycle has {len(reference)} samples, needs p+f={lag.window}")
    series = synchronize_battery(reference, battery)
    model = cva_mod.fit_cva(cva_mod.build_hankel(series, lag), retained)
    feats = features_from_series(model, series)
    limits = _profile(feats.projection, beta)

    net_cfg = dataclasses.replace(net_cfg, input_dim=model.retained_count)
    net = GruNetwork(net_cfg)
    capacities = battery.capacities
    net.params["out.b"][0] = capacities.mean()
    net, history = train(net, list(zip(feats.cv_sequences, capacities)), train_cfg)
    meta = {
        "battery_id": battery.id,
        "nominal_capacity": battery.nominal_capacity,
        "fingerprint": fingerprint(battery),
        "beta": float(beta),
        "train_config": train_cfg.to_dict(),
        "loss_history": history,
    }
    return SourceModel(np.array(reference, dtype=float), model, limits, net, meta)


def target_profile(source: SourceModel, target: BatteryRecord, window: int) -> ControlLimitProfile:
    if window < 1 or len(target) < window:
        raise InsufficientData(f"target {target.id!r} has {len(target)} cycles, window needs {window}")
    feats = extract_features(source.cva, source.reference_cycle, target.cycles[:window])
    return _profile(feats.projection, source.limits.beta)


def evaluate_transferability(
    source: SourceModel,
    target: BatteryRecord,
    window: int = DEFAULT_WINDOW,
    error_zone: float = 0.15,
    pass_fraction: float = 0.90,
) -> SimilarityVerdict:
    if len(source.limits) < window:
        raise InsufficientData(f"source profile covers {len(source.limits)} cycles, window needs {window}")
    tgt = target_profile(source, target, window)
    return similarity_gate(source.limits.head(window), tgt, error_zone, pass_fraction)


def train_target(
    source: SourceModel,
    target: BatteryRecord,
    window: int = DEFAULT_WINDOW,
    net_cfg: GruConfig | None = None,
    train_cfg: TrainConfig | None = None,
    force: bool = False,
    error_zone: float = 0.15,
    pass_fraction: float = 0.90,
) -> TargetModel:
    """Residual network on the first ``window`` target cycles.

    Raises :class:`NotTransferable` when the similarity gate fails, unless
    ``force`` is set, in which case the failing verdict is kept in the model.
    """
    verdict = evaluate_transferability(source, target, window, error_zone, pass_fraction)
    if not verdict.similar and not force:
        raise NotTransferable(verdict)
    net_cfg = net_cfg or GruConfig(input_dim=1, dropout_rates=(0.2, 0.2))
    train_cfg = train_cfg or TrainConfig(epochs=30)
    cycles = target.cycles[:window]
    feats = extract_features(source.cva, source.reference_cycle, cycles)
    measured = np.array([c.capacity for c in cycles])
    resid = residual_targets(source.network, feats.cv_sequences, measured)

    net_cfg = dataclasses.replace(net_cfg, input_dim=source.cva.lag.p)
    net = GruNetwork(net_cfg)
    # start from the constant mean residual; variation is learned on top
    net.params["out.w"][:] = 0.0
    net.params["out.b"][0] = resid.mean()
    net, history = train(net, list(zip(feats.rv_sequences, resid)), train_cfg)
    meta = {
        "nominal_capacity": target.nominal_capacity,
        "fingerprint": fingerprint(target),
        "window": int(window),
        "forced": bool(force and not verdict.similar),
        "train_config": train_cfg.to_dict(),
        "loss_history": history,
    }
    return TargetModel(source, net, target.id, verdict, meta)


def _source_of(model):
    return model.source if isinstance(model, TargetModel) else model


def estimate_cycles(model, cycles: Sequence[DischargeCycle]) -> list[CapacityEstimate]:
    """Capacity estimates; a bare :class:`SourceModel` has a zero residual part."""
    src = _source_of(model)
    feats = extract_features(src.cva, src.reference_cycle, cycles)
    out = []
    for k, c in enumerate(cycles):
        s = src.network.forward(feats.cv_sequences[k])
        r = model.residual_network.forward(feats.rv_sequences[k]) if isinstance(model, TargetModel) else 0.0
        total = s + r
        out.append(CapacityEstimate(c.cycle_index, s, r, total, total / model.nominal_capacity))
    return out


def estimate_online(model, cycle: DischargeCycle) -> CapacityEstimate:
    return estimate_cycles(model, [cycle])[0]


# -- persistence -------------------------------------------------------------


def _arr(a) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _unarr(doc) -> np.ndarray:
    return np.array(doc["data"], dtype=float).reshape(doc["shape"])


def _net_doc(net: GruNetwork) -> dict:
    return {
        "config": net.config.to_dict(),
        "tensors": {k: _arr(v) for k, v in net.params.items()},
    }


def _net_from(doc) -> GruNetwork:
    cfg = GruConfig.from_dict(doc["config"])
    return GruNetwork(cfg, {k: _unarr(v) for k, v in doc["tensors"].items()})


def _cva_doc(m: CvaModel) -> dict:
    return {
        "p": m.lag.p,
        "f": m.lag.f,
        "normalizer_past": {"mean": _arr(m.normalizer_past.mean), "std": _arr(m.normalizer_past.std)},
        "normalizer_future": {"mean": _arr(m.normalizer_future.mean), "std": _arr(m.normalizer_future.std)},
        "whitener": _arr(m.whitener),
        "singular_values": _arr(m.singular_values),
        "retained_count": m.retained_count,
        "J_c": _arr(m.J_c),
        "J_r": _arr(m.J_r),
        "V": _arr(m.V),
    }


def _cva_from(doc) -> CvaModel:
    def norm(d):
        return Normalizer(_unarr(d["mean"]), _unarr(d["std"]))

    return CvaModel(
        LagSpec(doc["p"], doc["f"]),
        norm(doc["normalizer_past"]),
        norm(doc["normalizer_future"]),
        _unarr(doc["whitener"]),
        _unarr(doc["singular_values"]),
        int(doc["retained_count"]),
        _unarr(doc["J_c"]),
        _unarr(doc["J_r"]),
        _unarr(doc["V"]),
    )


def _limits_doc(p: ControlLimitProfile) -> dict:
    return {
        "beta": p.beta,
        "kernel": "gaussian",
        "bandwidth": "silverman-1.06",
        "cl_t2": _arr(p.cl_t2),
        "cl_q": _arr(p.cl_q),
        "cycle_indices": list(p.cycle_indices),
    }


def _limits_from(doc) -> ControlLimitProfile:
    return ControlLimitProfile(doc["beta"], _unarr(doc["cl_t2"]), _unarr(doc["cl_q"]), tuple(doc["cycle_indices"]))


def _source_sections(m: SourceModel) -> dict:
    return {
        "sync": {"reference_cycle": _arr(m.reference_cycle), "local_cost": "abs"},
        "cva": _cva_doc(m.cva),
        "limits": _limits_doc(m.limits),
        "network": _net_doc(m.network),
        "train_meta": m.train_meta,
    }


def _source_from(doc) -> SourceModel:
    return SourceModel(
        _unarr(doc["sync"]["reference_cycle"]),
        _cva_from(doc["cva"]),
        _limits_from(doc["limits"]),
        _net_from(doc["network"]),
        doc["train_meta"],
    )


def model_to_dict(model) -> dict:
    if isinstance(model, TargetModel):
        payload = {"kind": "target", "created_with_seed": model.source.network.config.seed}
        payload.update(_source_sections(model.source))
        payload["residual_network"] = _net_doc(model.residual_network)
        payload["verdict"] = dataclasses.asdict(model.verdict)
        payload["target"] = {"id": model.target_id, "train_meta": model.train_meta}
    elif isinstance(model, SourceModel):
        payload = {"kind": "source", "created_with_seed": model.network.config.seed}
        payload.update(_source_sections(model))
    else:
        raise InvalidInput(f"cannot serialize {type(model).__name__}")
    return payload


def model_from_dict(payload: dict):
    src = _source_from(payload)
    if payload["kind"] == "source":
        return src
    if payload["kind"] == "target":
        return TargetModel(
            src,
            _net_from(payload["residual_network"]),
            payload["target"]["id"],
            SimilarityVerdict(**payload["verdict"]),
            payload["target"]["train_meta"],
        )
    raise CorruptModel(f"unknown model kind {payload['kind']!r}")


def _canonical(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)


def dumps_model(model) -> str:
    payload = model_to_dict(model)
    body = _canonical(payload)
    doc = {
        "format_version": FORMAT_VERSION,
        "checksum": hashlib.sha256(body.encode()).hexdigest(),
        **payload,
    }
    return json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"


def loads_model(text: str):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptModel(f"model file is not valid JSON: {exc.msg}") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CorruptModel("missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise VersionError(doc["format_version"], FORMAT_VERSION)
    checksum = doc.pop("checksum", None)
    doc.pop("format_version")
    if checksum != hashlib.sha256(_canonical(doc).encode()).hexdigest():
        raise CorruptModel("checksum mismatch")
    try:
        return model_from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptModel(f"malformed model document: {exc}") from None


def atomic_write(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model, path) -> None:
    atomic_write(path, dumps_model(model))


def load_model(path):
    return loads_model(Path(path).read_text())
