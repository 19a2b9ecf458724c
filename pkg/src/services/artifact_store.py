import base64
import hashlib
import json
import logging
import os
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from core.errors import ArtifactIOError, ChecksumMismatch, SchemaVersionMismatch
from core.types import (ConditionalDensity, Density, DualSolution, GaussianTransition, Grid, JointDensity, Policy,
                        RolloutResult, StageCache, SynthesisReport)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def encode_array(arr: np.ndarray) -> Dict[str, Any]:
    """Little-endian raw bytes in base64; bool arrays keep their dtype."""
    arr = np.asarray(arr)
    dtype = "|b1" if arr.dtype == bool else "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
    data = np.ascontiguousarray(arr, dtype=np.dtype(dtype))
    return {"dtype": dtype, "shape": list(arr.shape), "data": base64.b64encode(data.tobytes()).decode("ascii")}


def decode_array(obj: Dict[str, Any]) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype=np.dtype(obj["dtype"])).reshape(obj["shape"]).copy()


def _density_body(d: Density) -> dict:
    return {"grid": d.grid.to_dict(), "mass": encode_array(d.mass)}


def _density_from(body: dict) -> Density:
    return Density(Grid.from_dict(body["grid"]), decode_array(body["mass"]))


def _joint_body(j: JointDensity) -> dict:
    return {"grids": [g.to_dict() for g in j.grids], "mass": encode_array(j.mass)}


def _joint_from(body: dict) -> JointDensity:
    return JointDensity(tuple(Grid.from_dict(g) for g in body["grids"]), decode_array(body["mass"]))


def _conditional_body(c: ConditionalDensity) -> dict:
    return {
        "given": [g.to_dict() for g in c.given],
        "target": c.target.to_dict(),
        "table": encode_array(c.table),
        "flagged": encode_array(c.flagged),
    }


def _conditional_from(body: dict) -> ConditionalDensity:
    return ConditionalDensity(
        tuple(Grid.from_dict(g) for g in body["given"]),
        Grid.from_dict(body["target"]),
        decode_array(body["table"]),
        flagged=decode_array(body["flagged"]),
    )


def _family_body(stages: Sequence[ConditionalDensity]) -> dict:
    """Per-stage conditionals; a table shared by several stages is stored once."""
    members: List[ConditionalDensity] = []
    index: List[int] = []
    for c in stages:
        for j, m in enumerate(members):
            if m is c:
                index.append(j)
                break
        else:
            members.append(c)
            index.append(len(members) - 1)
    return {"stages": index, "members": [_conditional_body(m) for m in members]}


def _family_from(body: dict) -> tuple:
    members = [_conditional_from(m) for m in body["members"]]
    return tuple(members[j] for j in body["stages"])


def _gaussian_body(gt: GaussianTransition) -> dict:
    return {"a": gt.a, "b": gt.b, "sigma2": gt.sigma2}


def _report_body(r: SynthesisReport) -> dict:
    return {
        "b_star": encode_array(r.b_star),
        "state_grid": r.state_marginals[0].grid.to_dict(),
        "state_marginals": encode_array(np.vstack([p.mass for p in r.state_marginals])),
        "duals": [
            [{"lam": encode_array(d.lam), "active": list(d.active), "value": d.value, "converged": d.converged,
              "iterations": d.iterations, "grad_norm": d.grad_norm} for d in stage]
            for stage in r.duals
        ],
        # omega_hat is alpha_hat + beta_hat and duals are shared with "duals"
        "stages": [{"stage": s.stage, "alpha_hat": encode_array(s.alpha_hat), "beta_hat": encode_array(s.beta_hat),
                    "ln_gamma": encode_array(s.ln_gamma)} for s in r.stages],
        "unconverged": [list(c) for c in r.unconverged],
        "flagged_rows": [list(c) for c in r.flagged_rows],
        "closed_loop_kl": r.closed_loop_kl,
    }


def _report_from(body: dict) -> SynthesisReport:
    grid = Grid.from_dict(body["state_grid"])
    duals = tuple(
        tuple(DualSolution(decode_array(d["lam"]), tuple(d["active"]), d["value"], d["converged"],
                           d["iterations"], d["grad_norm"]) for d in stage)
        for stage in body["duals"]
    )
    stages = []
    for s in body["stages"]:
        a_hat, b_hat = decode_array(s["alpha_hat"]), decode_array(s["beta_hat"])
        stages.append(StageCache(s["stage"], a_hat, b_hat, a_hat + b_hat, decode_array(s["ln_gamma"]),
                                 duals[s["stage"] - 1]))
    return SynthesisReport(
        b_star=decode_array(body["b_star"]),
        state_marginals=tuple(Density(grid, row) for row in decode_array(body["state_marginals"])),
        duals=duals,
        unconverged=tuple(tuple(c) for c in body["unconverged"]),
        flagged_rows=tuple(tuple(c) for c in body["flagged_rows"]),
        stages=tuple(stages),
        closed_loop_kl=body["closed_loop_kl"],
    )


def _rollout_body(r: RolloutResult) -> dict:
    return {"x0": encode_array(r.x0), "x": encode_array(r.x), "u": encode_array(r.u), "clip_count": r.clip_count}


def _rollout_from(body: dict) -> RolloutResult:
    return RolloutResult(decode_array(body["x0"]), decode_array(body["x"]), decode_array(body["u"]),
                         body["clip_count"])


def _encode(artifact: Any) -> tuple:
    if isinstance(artifact, Density):
        return "density", _density_body(artifact)
    if isinstance(artifact, JointDensity):
        return "joint", _joint_body(artifact)
    if isinstance(artifact, ConditionalDensity):
        return "conditional", _conditional_body(artifact)
    if isinstance(artifact, Policy):
        return "policy", _family_body(artifact.stages)
    if isinstance(artifact, SynthesisReport):
        return "report", _report_body(artifact)
    if isinstance(artifact, GaussianTransition):
        return "gaussian_transition", _gaussian_body(artifact)
    if isinstance(artifact, RolloutResult):
        return "rollout", _rollout_body(artifact)
    if isinstance(artifact, tuple) and artifact and all(isinstance(c, ConditionalDensity) for c in artifact):
        return "family", _family_body(artifact)
    raise TypeError(f"cannot serialize {type(artifact).__name__}")


_DECODERS = {
    "density": _density_from,
    "joint": _joint_from,
    "conditional": _conditional_from,
    "policy": lambda body: Policy(_family_from(body)),
    "family": _family_from,
    "report": _report_from,
    "gaussian_transition": lambda body: GaussianTransition(body["a"], body["b"], body["sigma2"]),
    "rollout": _rollout_from,
}


def _canonical(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")


def checksum(payload: dict) -> str:
    return hashlib.sha256(_canonical(payload)).hexdigest()


class ArtifactStore:
    """JSON artifact files under one directory.

    Layout of every file:
      {
        "schema_version": 1,
        "kind": "density" | "joint" | "conditional" | "family" | "policy" | "report" | ...,
        "body": {...},                 -- arrays as base64 little-endian
        "checksum": "<sha256 of the canonical schema_version, kind and body>",
        "created": "<ISO 8601>"        -- only when stamping is on, not checksummed
      }
    """

    def __init__(self, root: Union[str, Path], stamp: bool = False):
        self.root = Path(root)
        self.stamp = stamp
        self._lock = threading.Lock()
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ArtifactIOError(f"cannot create artifact directory {self.root}: {e}") from e

    def path(self, name: str) -> Path:
        return self.root / (name if name.endswith(".json") else f"{name}.json")

    # Write one artifact atomically
    def save(self, name: str, artifact: Any) -> Path:
        kind, body = _encode(artifact)
        payload = {"schema_version": SCHEMA_VERSION, "kind": kind, "body": body}
        document = dict(payload, checksum=checksum(payload))
        if self.stamp:
            document["created"] = datetime.now(timezone.utc).isoformat()
        target = self.path(name)
        tmp = target.with_suffix(".json.tmp")
        with self._lock:
            try:
                tmp.write_bytes(_canonical(document))
                os.replace(tmp, target)
            except OSError as e:
                raise ArtifactIOError(f"cannot write {target}: {e}") from e
        logger.info(f"💾 Saved {kind} artifact to {target}")
        return target

    def load(self, name: str, kind: Optional[str] = None) -> Any:
        """Read, verify and decode an artifact; `kind` optionally pins the expected type."""
        source = self.path(name)
        try:
            raw = source.read_bytes()
        except FileNotFoundError:
            raise ArtifactIOError(f"artifact {source} not found") from None
        except OSError as e:
            raise ArtifactIOError(f"cannot read {source}: {e}") from e
        try:
            document = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ChecksumMismatch(f"artifact {source} is corrupt: {e}") from e
        if not isinstance(document, dict) or "checksum" not in document:
            raise ChecksumMismatch(f"artifact {source} carries no checksum")
        version = document.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaVersionMismatch(f"artifact {source} has schema version {version}, expected {SCHEMA_VERSION}")
        payload = {key: document.get(key) for key in ("schema_version", "kind", "body")}
        if checksum(payload) != document["checksum"]:
            raise ChecksumMismatch(f"artifact {source} failed checksum verification")
        if kind is not None and payload["kind"] != kind:
            raise ArtifactIOError(f"artifact {source} holds a {payload['kind']}, expected a {kind}")
        try:
            return _DECODERS[payload["kind"]](payload["body"])
        except KeyError as e:
            raise ArtifactIOError(f"artifact {source} is missing field {e}") from e

    def exists(self, name: str) -> bool:
        return self.path(name).exists()
