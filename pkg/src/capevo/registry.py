"""Versioned ECM store: creation, deployment, gated evolution, rollback, deprecation."""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable

from .core import (
    KIND_INTERFACES,
    CapabilityKind,
    CapabilitySet,
    EcmRecord,
    LifecycleState,
    ParamVector,
    canonical_json,
)
from .errors import (
    DuplicateKind,
    GateNotPassed,
    InvariantViolation,
    LifecycleError,
    SnapshotMissing,
    UnknownEcm,
    UnknownVersion,
)
from .governance import GateToken

MANIFEST = "manifest.json"


class CreationMode(str, Enum):
    MANUAL = "Manual"
    SYNTHESIZED = "Synthesized"
    CLONED = "Cloned"


@dataclass(frozen=True)
class RegistryEvent:
    seq: int
    iteration: int
    op: str
    ecm_id: str
    version: int | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        return {"seq": self.seq, "iteration": self.iteration, "op": self.op,
                "ecm_id": self.ecm_id, "version": self.version, "detail": self.detail}


class Registry:
    """Append-only record store with one deployment pointer per ECM.

    Records are never mutated; lifecycle state lives in a side table so the
    stored parameters of every version stay byte-identical forever.  Writes are
    serialised by a lock; returned records are immutable snapshots.
    """

    def __init__(self):
        self._records: dict[tuple[str, int], EcmRecord] = {}
        self._state: dict[tuple[str, int], LifecycleState] = {}
        self._kind: dict[str, CapabilityKind] = {}
        self._latest: dict[str, int] = {}
        self._deployed: dict[str, int] = {}
        self._deprecated: set[str] = set()
        self._creation_log: list[dict] = []
        self._events: list[RegistryEvent] = []
        self._counter = 0
        self._lock = threading.RLock()
        self.iteration = 0

    # -- internal ---------------------------------------------------------

    def _log(self, op: str, ecm_id: str, version: int | None = None, detail: str = "") -> None:
        self._events.append(RegistryEvent(len(self._events), self.iteration, op, ecm_id, version, detail))

    def _require(self, ecm_id: str) -> None:
        if ecm_id not in self._kind:
            raise UnknownEcm(ecm_id)

    def _require_version(self, ecm_id: str, version: int) -> None:
        self._require(ecm_id)
        if (ecm_id, version) not in self._records:
            raise UnknownVersion(f"{ecm_id} v{version}")

    # -- lifecycle operations ----------------------------------------------

    def create_ecm(
        self,
        kind: CapabilityKind,
        initial: ParamVector | None,
        descriptor: str,
        mode: CreationMode = CreationMode.MANUAL,
        source: str | None = None,
    ) -> tuple[str, int]:
        kind = CapabilityKind(kind)
        mode = CreationMode(mode)
        with self._lock:
            for eid, k in self._kind.items():
                if k == kind and eid not in self._deprecated:
                    raise DuplicateKind(f"{eid} already serves {kind.value}")
            if mode == CreationMode.CLONED:
                if source is None:
                    raise ValueError("cloning needs a source ECM")
                self._require(source)
                v = self._deployed.get(source, self._latest[source])
                initial = self._records[(source, v)].params
            if initial is None:
                raise ValueError("initial parameters are required")
            self._counter += 1
            ecm_id = f"{kind.value.lower()}-{self._counter:04d}"
            i, o = KIND_INTERFACES[kind]
            rec = EcmRecord(ecm_id, kind, 0, initial, i, o, descriptor)
            self._records[(ecm_id, 0)] = rec
            self._state[(ecm_id, 0)] = LifecycleState.CREATED
            self._kind[ecm_id] = kind
            self._latest[ecm_id] = 0
            self._creation_log.append({"ecm_id": ecm_id, "kind": kind.value, "mode": mode.value, "source": source})
            self._log("create", ecm_id, 0, mode.value)
            return ecm_id, 0

    def deploy(self, ecm_id: str, version: int = 0) -> CapabilitySet:
        """Initial deployment of a freshly created version (no incumbent to gate against)."""
        with self._lock:
            self._require_version(ecm_id, version)
            if ecm_id in self._deprecated:
                raise LifecycleError(f"{ecm_id} is deprecated")
            if ecm_id in self._deployed:
                raise LifecycleError(f"{ecm_id} already has a deployed version; use promote()")
            if self._state[(ecm_id, version)] != LifecycleState.CREATED:
                raise LifecycleError(f"{ecm_id} v{version} is not in state Created")
            self._deployed[ecm_id] = version
            self._state[(ecm_id, version)] = LifecycleState.DEPLOYED
            self._log("deploy", ecm_id, version)
            return self.active_set()

    def register_candidate(self, ecm_id: str, new_params: ParamVector) -> int:
        with self._lock:
            self._require(ecm_id)
            if ecm_id in self._deprecated:
                raise LifecycleError(f"{ecm_id} is deprecated")
            version = self._latest[ecm_id] + 1
            base = self._records[(ecm_id, 0)]
            self._records[(ecm_id, version)] = replace(base, version=version, params=new_params,
                                                       lifecycle_state=LifecycleState.CREATED)
            self._state[(ecm_id, version)] = LifecycleState.PENDING
            self._latest[ecm_id] = version
            self._log("register", ecm_id, version)
            return version

    def promote(self, ecm_id: str, version: int, token: GateToken | None) -> CapabilitySet:
        with self._lock:
            self._require_version(ecm_id, version)
            if token is None or token.ecm_id != ecm_id or token.version != version:
                raise GateNotPassed(f"{ecm_id} v{version} has no passing gate token")
            if self._state[(ecm_id, version)] != LifecycleState.PENDING:
                raise LifecycleError(f"{ecm_id} v{version} is not Pending")
            prev = self._deployed.get(ecm_id)
            if prev is not None:
                self._state[(ecm_id, prev)] = LifecycleState.CREATED
            self._deployed[ecm_id] = version
            self._state[(ecm_id, version)] = LifecycleState.DEPLOYED
            self._log("promote", ecm_id, version, f"from v{prev} gate {token.report_digest[:16]}")
            return self.active_set()

    def rollback(self, ecm_id: str, target_version: int) -> CapabilitySet:
        with self._lock:
            self._require_version(ecm_id, target_version)
            state = self._state[(ecm_id, target_version)]
            if state == LifecycleState.DEPRECATED:
                raise LifecycleError(f"{ecm_id} v{target_version} is deprecated")
            if state == LifecycleState.PENDING:
                raise GateNotPassed(f"{ecm_id} v{target_version} was never gated")
            prev = self._deployed.get(ecm_id)
            if prev == target_version:
                return self.active_set()
            if prev is not None:
                self._state[(ecm_id, prev)] = LifecycleState.CREATED
            self._deployed[ecm_id] = target_version
            self._state[(ecm_id, target_version)] = LifecycleState.DEPLOYED
            self._log("rollback", ecm_id, target_version, f"from v{prev}")
            return self.active_set()

    def deprecate(self, ecm_id: str) -> None:
        with self._lock:
            self._require(ecm_id)
            if ecm_id in self._deprecated:
                return
            for v in range(self._latest[ecm_id] + 1):
                self._state[(ecm_id, v)] = LifecycleState.DEPRECATED
            self._deployed.pop(ecm_id, None)
            self._deprecated.add(ecm_id)
            self._log("deprecate", ecm_id)

    # -- queries ------------------------------------------------------------

    def get_version(self, ecm_id: str, version: int) -> EcmRecord:
        self._require_version(ecm_id, version)
        return replace(self._records[(ecm_id, version)], lifecycle_state=self._state[(ecm_id, version)])

    def deployed_version(self, ecm_id: str) -> int | None:
        self._require(ecm_id)
        return self._deployed.get(ecm_id)

    def deployed_record(self, ecm_id: str) -> EcmRecord:
        v = self.deployed_version(ecm_id)
        if v is None:
            raise LifecycleError(f"{ecm_id} has no deployed version")
        return self.get_version(ecm_id, v)

    def deployed_records(self) -> dict[str, EcmRecord]:
        return {eid: self.get_version(eid, v) for eid, v in sorted(self._deployed.items())}

    def active_set(self) -> CapabilitySet:
        return CapabilitySet.from_records(self.deployed_records().values())

    def ecm_ids(self) -> list[str]:
        return sorted(self._kind)

    def kind_of(self, ecm_id: str) -> CapabilityKind:
        self._require(ecm_id)
        return self._kind[ecm_id]

    def versions(self, ecm_id: str) -> list[EcmRecord]:
        self._require(ecm_id)
        return [self.get_version(ecm_id, v) for v in range(self._latest[ecm_id] + 1)]

    def latest_version(self, ecm_id: str) -> int:
        self._require(ecm_id)
        return self._latest[ecm_id]

    def events(self, ecm_id: str | None = None) -> list[RegistryEvent]:
        return [e for e in self._events if ecm_id is None or e.ecm_id == ecm_id]

    @property
    def creation_log(self) -> list[dict]:
        return list(self._creation_log)

    def is_deprecated(self, ecm_id: str) -> bool:
        return ecm_id in self._deprecated

    def check_invariants(self) -> None:
        for eid in self._kind:
            versions = sorted(v for (e, v) in self._records if e == eid)
            if versions != list(range(self._latest[eid] + 1)):
                raise InvariantViolation(f"{eid}: versions are not gapless")
            deployed = [v for v in versions if self._state[(eid, v)] == LifecycleState.DEPLOYED]
            if len(deployed) > 1:
                raise InvariantViolation(f"{eid}: more than one deployed version")
            if eid in self._deployed and deployed != [self._deployed[eid]]:
                raise InvariantViolation(f"{eid}: deployment pointer out of sync")
        kinds = [self._kind[e] for e in self._deployed]
        if len(kinds) != len(set(kinds)):
            raise InvariantViolation("two deployed ECMs serve the same kind")

    # -- persistence --------------------------------------------------------

    def save(self, directory: str | os.PathLike) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for eid in self.ecm_ids():
            lines = [canonical_json(self._records[(eid, v)].to_dict()) for v in range(self._latest[eid] + 1)]
            (d / f"{eid}.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
        manifest = {
            "deployed": dict(sorted(self._deployed.items())),
            "states": {f"{e}@{v}": s.value for (e, v), s in sorted(self._state.items())},
            "deprecated": sorted(self._deprecated),
            "counter": self._counter,
            "creation_log": self._creation_log,
            "events": [e.to_dict() for e in self._events],
        }
        (d / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "Registry":
        d = Path(directory)
        if not (d / MANIFEST).is_file():
            raise SnapshotMissing(f"no registry manifest in {d}")
        manifest = json.loads((d / MANIFEST).read_text(encoding="utf-8"))
        reg = cls()
        for path in sorted(d.glob("*.jsonl")):
            for line in path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                rec = EcmRecord.from_dict(json.loads(line))
                reg._records[(rec.ecm_id, rec.version)] = rec
                reg._kind[rec.ecm_id] = rec.kind
                reg._latest[rec.ecm_id] = max(reg._latest.get(rec.ecm_id, 0), rec.version)
        for key, state in manifest["states"].items():
            eid, v = key.rsplit("@", 1)
            reg._state[(eid, int(v))] = LifecycleState(state)
        reg._deployed = {k: int(v) for k, v in manifest["deployed"].items()}
        reg._deprecated = set(manifest["deprecated"])
        reg._counter = manifest["counter"]
        reg._creation_log = list(manifest["creation_log"])
        reg._events = [RegistryEvent(**e) for e in manifest["events"]]
        reg.check_invariants()
        return reg

    def snapshot_equal(self, other: "Registry") -> bool:
        return (
            self._records == other._records
            and self._state == other._state
            and self._deployed == other._deployed
            and self._deprecated == other._deprecated
            and self._events == other._events
        )


def bootstrap(registry: Registry, params_by_kind: Iterable[tuple[CapabilityKind, ParamVector]],
              descriptors: dict | None = None) -> dict[CapabilityKind, str]:
    """Create and deploy one ECM per kind; returns kind -> ecm_id."""
    out = {}
    for kind, params in params_by_kind:
        desc = (descriptors or {}).get(kind, DEFAULT_DESCRIPTORS[kind])
        eid, v = registry.create_ecm(kind, params, desc, CreationMode.MANUAL)
        registry.deploy(eid, v)
        out[kind] = eid
    return out


DEFAULT_DESCRIPTORS = {
    CapabilityKind.PERCEIVE: "locate an object and estimate its pose",
    CapabilityKind.GRASP: "grasp the located object",
    CapabilityKind.PLACE: "place the held object at a target",
    CapabilityKind.ALIGN: "align the held object above a reference",
    CapabilityKind.TRANSPORT: "carry the held object to a container",
    CapabilityKind.POUR: "pour the held container into a target container",
    CapabilityKind.SORT: "move a located object into its bin",
    CapabilityKind.INSERT: "insert the held object into a fixture",
    CapabilityKind.RESCAN: "re-observe the scene after assembly",
}
