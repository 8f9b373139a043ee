"""Software TPM 2.0 subset: SHA-256 PCR bank, trial/policy sessions with
the PCR policy command, and policy-sealed nonvolatile storage.

The command surface is an in-process API rather than the TCG wire protocol.
Policy digests follow the TCG chaining rule for TPM2_PolicyPCR:

    pcr_digest    = SHA256(selected PCR values concatenated in index order)
    policy_digest = SHA256(old_digest || CC_PolicyPCR || encode(selection)
                           || pcr_digest)

where CC_PolicyPCR is the 4-byte big-endian command code 0x0000017F and
encode(selection) is a one-bank TPML_PCR_SELECTION: 4-byte big-endian bank
count (always 1), 2-byte algorithm id 0x000B (SHA-256), a 1-byte selection
length of 3, then a 3-byte bitmap with bit (index % 8) of byte (index // 8)
set per selected PCR. This encoding is fixed so external tooling can
reproduce every digest this module produces.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    DataTooLarge,
    HierarchyDisabled,
    IndexInUse,
    IndexOutOfRange,
    NotWritten,
    PolicyMismatch,
    SessionTableFull,
    TrialSessionNotAllowed,
    UnknownIndex,
    UnknownSession,
)

NUM_PCRS = 24
DIGEST_SIZE = 32
ZERO_DIGEST = b"\x00" * DIGEST_SIZE

CC_POLICY_PCR = 0x0000017F
ALG_SHA256 = 0x000B
PCR_SELECT_BYTES = 3

SESSION_TABLE_LIMIT = 64

SNAPSHOT_VERSION = 1

TRIAL = "trial"
POLICY = "policy"


@dataclass(frozen=True)
class PcrSelection:
    """A set of PCR indices within one SHA-256 bank."""

    selected: frozenset[int]

    def __post_init__(self):
        if not self.selected:
            raise ValueError("PCR selection must be nonempty")
        if any(not 0 <= i < NUM_PCRS for i in self.selected):
            raise ValueError("PCR index out of range")

    @classmethod
    def of(cls, *indices: int) -> "PcrSelection":
        return cls(frozenset(indices))

    def encode(self) -> bytes:
        bitmap = bytearray(PCR_SELECT_BYTES)
        for index in self.selected:
            bitmap[index // 8] |= 1 << (index % 8)
        return struct.pack(">IHB", 1, ALG_SHA256, PCR_SELECT_BYTES) + bytes(bitmap)


@dataclass
class PolicySession:
    handle: int
    kind: str  # TRIAL or POLICY
    policy_digest: bytes = ZERO_DIGEST


@dataclass
class NvSlot:
    index: int
    size: int
    auth_policy: bytes
    data: bytes = b""
    written: bool = False


@dataclass
class TpmState:
    """Mutable TPM state; callers serialize all commands."""

    pcrs: list[bytes] = field(default_factory=lambda: [ZERO_DIGEST] * NUM_PCRS)
    sessions: dict[int, PolicySession] = field(default_factory=dict)
    nv: dict[int, NvSlot] = field(default_factory=dict)
    platform_hierarchy_enabled: bool = True
    _next_handle: int = 0x03000000


def pcr_extend(tpm: TpmState, index: int, measurement: bytes) -> bytes:
    """Fold a 32-byte measurement into a PCR; returns the new PCR value."""
    if not 0 <= index < NUM_PCRS:
        raise IndexOutOfRange(f"PCR index {index} outside [0, {NUM_PCRS})")
    if len(measurement) != DIGEST_SIZE:
        raise ValueError("measurement must be a 32-byte digest")
    new_value = hashlib.sha256(tpm.pcrs[index] + measurement).digest()
    tpm.pcrs[index] = new_value
    return new_value


def start_auth_session(tpm: TpmState, kind: str) -> int:
    if kind not in (TRIAL, POLICY):
        raise ValueError(f"unknown session kind {kind!r}")
    if len(tpm.sessions) >= SESSION_TABLE_LIMIT:
        raise SessionTableFull(f"session table holds {SESSION_TABLE_LIMIT} entries")
    handle = tpm._next_handle
    tpm._next_handle += 1
    tpm.sessions[handle] = PolicySession(handle=handle, kind=kind)
    return handle


def flush_session(tpm: TpmState, handle: int) -> None:
    tpm.sessions.pop(handle, None)


def _get_session(tpm: TpmState, handle: int) -> PolicySession:
    try:
        return tpm.sessions[handle]
    except KeyError:
        raise UnknownSession(f"no session with handle 0x{handle:x}") from None


def policy_pcr(tpm: TpmState, handle: int, selection: PcrSelection) -> bytes:
    """Bind the session's policy digest to the current selected PCR values.

    Trial sessions get the identical update; they exist precisely to compute
    digests for enrollment without granting access.
    """
    session = _get_session(tpm, handle)
    pcr_digest = hashlib.sha256(
        b"".join(tpm.pcrs[i] for i in sorted(selection.selected))
    ).digest()
    session.policy_digest = hashlib.sha256(
        session.policy_digest
        + struct.pack(">I", CC_POLICY_PCR)
        + selection.encode()
        + pcr_digest
    ).digest()
    return session.policy_digest


def policy_get_digest(tpm: TpmState, handle: int) -> bytes:
    return _get_session(tpm, handle).policy_digest


def nv_define_space(tpm: TpmState, index: int, size: int, auth_policy: bytes) -> None:
    if not tpm.platform_hierarchy_enabled:
        raise HierarchyDisabled("platform hierarchy is disabled until reset")
    if index in tpm.nv:
        raise IndexInUse(f"NV index 0x{index:x} already defined")
    if len(auth_policy) != DIGEST_SIZE:
        raise ValueError("auth policy must be a 32-byte digest")
    tpm.nv[index] = NvSlot(index=index, size=size, auth_policy=auth_policy)


def _get_slot(tpm: TpmState, index: int) -> NvSlot:
    try:
        return tpm.nv[index]
    except KeyError:
        raise UnknownIndex(f"NV index 0x{index:x} not defined") from None


def nv_write(tpm: TpmState, index: int, data: bytes) -> None:
    if not tpm.platform_hierarchy_enabled:
        raise HierarchyDisabled("platform hierarchy is disabled until reset")
    slot = _get_slot(tpm, index)
    if len(data) > slot.size:
        raise DataTooLarge(f"{len(data)} bytes into a {slot.size}-byte slot")
    slot.data = data
    slot.written = True


def nv_read(tpm: TpmState, index: int, handle: int) -> bytes:
    """Policy-gated read: the session digest must equal the slot policy.

    That byte equality is the entire authorization check; a mismatch means
    the PCR state differs from the one enrolled when the slot was defined.
    """
    slot = _get_slot(tpm, index)
    session = _get_session(tpm, handle)
    if session.kind == TRIAL:
        raise TrialSessionNotAllowed("trial sessions cannot authorize reads")
    if not slot.written:
        raise NotWritten(f"NV index 0x{index:x} defined but never written")
    if session.policy_digest != slot.auth_policy:
        raise PolicyMismatch(f"policy digest does not satisfy NV index 0x{index:x}")
    return slot.data


def nv_undefine_space(tpm: TpmState, index: int) -> None:
    if not tpm.platform_hierarchy_enabled:
        raise HierarchyDisabled("platform hierarchy is disabled until reset")
    _get_slot(tpm, index)
    del tpm.nv[index]


def tpm_reset(tpm: TpmState) -> None:
    """Power-cycle semantics: PCRs zeroed, sessions dropped, NV retained."""
    tpm.pcrs = [ZERO_DIGEST] * NUM_PCRS
    tpm.sessions = {}
    tpm.platform_hierarchy_enabled = True


def disable_platform_hierarchy(tpm: TpmState) -> None:
    """Refuse NV define/write/undefine until the next reset.

    Models the platform firmware locking provisioning authority before
    handing control to the OS; policy-gated reads are unaffected.
    """
    tpm.platform_hierarchy_enabled = False


# --- state snapshot persistence -------------------------------------------

def save_state(tpm: TpmState, path: str | Path) -> None:
    """Write a versioned snapshot (PCRs and NV slots, hex encoded)."""
    doc = {
        "version": SNAPSHOT_VERSION,
        "pcrs": [value.hex() for value in tpm.pcrs],
        "nv": [
            {
                "index": slot.index,
                "size": slot.size,
                "auth_policy": slot.auth_policy.hex(),
                "data": slot.data.hex(),
                "written": slot.written,
            }
            for slot in sorted(tpm.nv.values(), key=lambda s: s.index)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_state(path: str | Path) -> TpmState:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported TPM snapshot version {doc.get('version')!r}")
    tpm = TpmState()
    pcrs = [bytes.fromhex(h) for h in doc["pcrs"]]
    if len(pcrs) != NUM_PCRS or any(len(p) != DIGEST_SIZE for p in pcrs):
        raise ValueError("snapshot PCR bank malformed")
    tpm.pcrs = pcrs
    for entry in doc["nv"]:
        tpm.nv[entry["index"]] = NvSlot(
            index=entry["index"],
            size=entry["size"],
            auth_policy=bytes.fromhex(entry["auth_policy"]),
            data=bytes.fromhex(entry["data"]),
            written=entry["written"],
        )
    return tpm
