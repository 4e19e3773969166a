"""JSON experiment configuration.

A configuration is one document with top-level keys ``model``, ``noise``,
``grid``, ``ensemble`` and ``experiment``::

    {
      "model": {"type": "spin_boson", "omega": 1.0, "g": 1.0},
      "noise": {"x": [{"type": "white", "weight": 0.5}],
                "y": [{"type": "exp", "c": 1.0, "a": 1.0}]},
      "grid": {"t_max": 2.0, "dt": 0.001},
      "ensemble": {"n_trajectories": 10000, "master_seed": 123, "integrator": "em_ito"},
      "experiment": {"expected_verdict": "pass", "branch": {"s": 1.0}}
    }
"""

import hashlib
import json

from .ensemble import BranchParams, ConfigError, ExperimentConfig
from .integrators import METHODS
from .models import ModelError, model_from_json
from .noise import CorrelationPair, TimeGrid

SECTIONS = ("model", "noise", "grid", "ensemble", "experiment")
VERDICTS = ("pass", "fail")


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def config_hash(raw):
    """sha256 of the canonical (sorted, compact) JSON encoding."""
    return hashlib.sha256(canonical_json(raw).encode("ascii")).hexdigest()


def load_raw(path):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    for key in SECTIONS[:4]:
        if key not in raw:
            raise ConfigError(f"missing top-level key {key!r}")
    raw.setdefault("experiment", {})
    return raw


def _branch(d):
    if d is None:
        return None
    d = dict(d)
    if "offsets" in d:
        d["offsets"] = tuple(float(o) for o in d["offsets"])
    return BranchParams(**d)


def build(raw, seed=None):
    """ExperimentConfig and the experiment section from a raw config dict."""
    try:
        model = model_from_json(raw["model"])
        pair = CorrelationPair.from_json(raw["noise"])
        grid = TimeGrid(float(raw["grid"]["t_max"]), float(raw["grid"]["dt"]))
        ens = dict(raw["ensemble"])
        exp = dict(raw.get("experiment") or {})
        integrator = ens.get("integrator", "em_ito")
        if integrator not in METHODS:
            raise ConfigError(f"unknown integrator {integrator!r}, expected one of {METHODS}")
        master_seed = int(ens.get("master_seed", 0) if seed is None else seed)
        if not 0 <= master_seed < 2**64:
            raise ConfigError("master_seed must be an unsigned 64-bit integer")
        cfg = ExperimentConfig(
            model=model, pair=pair, grid=grid,
            n_trajectories=int(ens.get("n_trajectories", 1000)),
            master_seed=master_seed, integrator=integrator,
            n_snapshots=int(ens.get("n_snapshots", 100)),
            record_times=tuple(float(t) for t in ens.get("record_times", ())),
            branch=_branch(exp.get("branch")))
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, ModelError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    verdict = str(exp.get("expected_verdict", "pass")).lower()
    if verdict not in VERDICTS:
        raise ConfigError(f"expected_verdict must be one of {VERDICTS}")
    exp["expected_verdict"] = verdict
    return cfg, exp
