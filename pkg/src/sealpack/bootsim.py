"""Deterministic boot-chain simulator.

Reproduces the measured-boot flow around packed modules: power-on resets the
TPM, the PEI phase measures every firmware volume into PCR0, the DXE
dispatcher runs modules (apriori entries first per volume, volumes in SPI
order), the unpack agent unseals the key and installs the unpack protocol,
packed modules dispatch through their stub descriptor and decrypt in SMRAM,
and SMRAM locks at the end of DXE before the OS phase.

An unseal failure (the live PCR0 differs from the enrolled value) halts the
boot; neither the key nor any packed module plaintext ever enters SMRAM on
such a boot.
"""

from __future__ import annotations

import hashlib
import json
import time
import uuid
from dataclasses import dataclass, field

from . import pe
from .cipher import Iv, SymmetricKey, decrypt_cbc
from .errors import (
    DescriptorMismatch,
    MalformedHeader,
    NotWritten,
    PolicyMismatch,
    ProtocolNotInstalled,
    SimError,
    UnknownHandler,
    UnknownIndex,
    WrongPhase,
)
from .packer import UNPACK_PROTOCOL_GUID, StubDescriptor, _stub_descriptor_of
from .platform_desc import (
    KIND_SMM,
    SERVICE_ECHO,
    SERVICE_SEAL_KEY,
    PlatformDescription,
    UefiModule,
    load_platform_description,
)
from .tpm import (
    POLICY,
    PcrSelection,
    TpmState,
    flush_session,
    load_state,
    nv_read,
    pcr_extend,
    policy_pcr,
    start_auth_session,
    tpm_reset,
)

PHASE_SEC = "sec"
PHASE_PEI = "pei"
PHASE_DXE = "dxe"
PHASE_BDS = "bds"
PHASE_RT = "rt"

HALT_UNSEAL_FAILED = "UnsealFailed"
HALT_FLASH_CORRUPT = "FlashCorrupt"
HALT_SENTINEL_MISMATCH = "SentinelMismatch"

# PCR0 cap measurement, folded in after a successful unseal when enabled.
CAP_MEASUREMENT = hashlib.sha256(b"SMMPACK-CAP").digest()

# SMI handler the agent registers for the update flow's in-SMM resealing.
AGENT_SEAL_HANDLER_ID = "seal-key"


class SmramAccessDenied(SimError):
    """Non-SMM access to SMRAM outside the pre-lock DXE window."""


@dataclass
class LoadedModule:
    guid: uuid.UUID
    text: bytearray
    text_rva: int
    plain_len: int
    cipher_len: int
    packed: bool
    sentinel_offset: int
    decrypted: bool = False


@dataclass
class SmramRegion:
    base: int
    size: int
    locked: bool = False
    contents: dict[str, LoadedModule] = field(default_factory=dict)
    agent_key: bytes | None = None
    # update staging written by the seal-key SMI handler
    pending_new_key: bytes | None = None
    pending_new_pcr0: bytes | None = None

    def overlaps(self, addr: int, size: int) -> bool:
        if size == 0:
            return False
        return addr < self.base + self.size and self.base < addr + size


@dataclass
class SmiHandler:
    id: str
    owner_guid: uuid.UUID
    service: str


@dataclass
class CommBuffer:
    addr: int
    size: int
    data: bytes = b""


@dataclass
class HandlerResult:
    handler_id: str
    ok: bool
    refused: bool = False
    data: bytes = b""
    note: str = ""


@dataclass
class UpdateStaging:
    """Persistent update context: survives the simulated crashes the
    failure-injection stages model."""

    capsule_bytes: bytes
    original_volumes: list  # deep copy of the pre-update flash
    flash_complete: bool = False
    failed_stage: str | None = None


@dataclass
class Platform:
    desc: PlatformDescription
    tpm: TpmState
    smram: SmramRegion
    protocol_db: dict[str, dict] = field(default_factory=dict)
    smi_handlers: dict[str, SmiHandler] = field(default_factory=dict)
    boot_phase: str = PHASE_SEC
    flash_corrupt: bool = False
    cap_extended: bool = False
    staging: UpdateStaging | None = None
    scenario_captures: list[bytes] = field(default_factory=list)
    comm_violations: list[str] = field(default_factory=list)

    @classmethod
    def from_description(cls, desc: PlatformDescription) -> "Platform":
        state_file = desc.tpm.state_file
        if state_file is not None and state_file.exists():
            state = load_state(state_file)
        else:
            state = TpmState()
        return cls(
            desc=desc,
            tpm=state,
            smram=SmramRegion(base=desc.smram_base, size=desc.smram_size),
        )

    @classmethod
    def from_file(cls, path) -> "Platform":
        return cls.from_description(load_platform_description(path))


@dataclass
class BootResult:
    pcr0_final: bytes
    dispatched: list[dict]
    unpack_events: list[dict]
    halted_reason: str | None = None

    def to_dict(self) -> dict:
        return {
            "pcr0_final": self.pcr0_final.hex(),
            "dispatched": self.dispatched,
            "unpack_events": self.unpack_events,
            "halted_reason": self.halted_reason,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _parse_quietly(pe_bytes: bytes) -> pe.PeImage | None:
    try:
        return pe.parse_pe(pe_bytes)
    except MalformedHeader:
        return None


def _descriptor_of_bytes(pe_bytes: bytes) -> StubDescriptor | None:
    image = _parse_quietly(pe_bytes)
    return _stub_descriptor_of(image) if image is not None else None


def measure_fvs(platform: Platform) -> bytes:
    """PEI measurement: extend PCR0 with each volume's hash in SPI order."""
    if platform.boot_phase != PHASE_PEI:
        raise WrongPhase(f"measurement runs in PEI, not {platform.boot_phase}")
    value = platform.tpm.pcrs[0]
    for fv in platform.desc.firmware_volumes:
        value = pcr_extend(
            platform.tpm, 0, hashlib.sha256(fv.measurement_bytes()).digest()
        )
    return value


def validate_comm_buffer(platform: Platform, addr: int, size: int) -> bool:
    """True iff the buffer lies entirely outside SMRAM (empty buffers pass)."""
    return not platform.smram.overlaps(addr, size)


def smram_read(platform: Platform, actor: str) -> dict:
    """Read SMRAM as a given actor; enforces the confidentiality model.

    SMM code always reads. Anything else succeeds only through the DMA
    window: before the lock, during DXE, and not when the DMA protected
    range covers SMRAM.
    """
    if actor != "smm":
        if platform.smram.locked or platform.boot_phase != PHASE_DXE:
            raise SmramAccessDenied(f"{actor} access to locked/out-of-window SMRAM")
        if actor == "dma" and platform.desc.security.dpr_enabled:
            raise SmramAccessDenied("DMA protected range covers SMRAM")
    return {
        "agent_key": platform.smram.agent_key,
        "texts": {
            guid: bytes(mod.text) for guid, mod in platform.smram.contents.items()
        },
    }


def cap_extend_pcr0(platform: Platform) -> bool:
    """Extend PCR0 with the cap constant after a successful unseal, once per
    boot; makes the enrolled policy unsatisfiable for the rest of the boot."""
    if not platform.desc.tpm.cap_extend:
        return False
    if platform.smram.agent_key is None or platform.cap_extended:
        return False
    pcr_extend(platform.tpm, 0, CAP_MEASUREMENT)
    platform.cap_extended = True
    return True


def unpack(platform: Platform, module_guid: uuid.UUID, base: int, size: int) -> None:
    """The unpack protocol service: decrypt a loaded module's text in SMRAM.

    The caller's (base, size) pair must match the module's stub descriptor.
    """
    if str(UNPACK_PROTOCOL_GUID) not in platform.protocol_db:
        raise ProtocolNotInstalled(
            "packed module dispatched before the unpack agent installed its protocol"
        )
    if platform.boot_phase != PHASE_DXE:
        raise WrongPhase("unpack is a DXE-phase service")
    loaded = platform.smram.contents.get(str(module_guid))
    if loaded is None:
        raise SimError(f"module {module_guid} is not loaded in SMRAM")
    if (base, size) != (loaded.text_rva, loaded.cipher_len):
        raise DescriptorMismatch(
            f"unpack({base:#x}, {size}) does not match descriptor "
            f"({loaded.text_rva:#x}, {loaded.cipher_len})"
        )
    key = platform.smram.agent_key
    if key is None:
        raise SimError("unpack protocol installed without an unsealed key")
    descriptor = flash_descriptor(platform, module_guid)
    plaintext = decrypt_cbc(
        SymmetricKey(key), Iv(descriptor.iv), bytes(loaded.text[:size])
    )
    loaded.text[:size] = plaintext
    loaded.decrypted = True


def flash_descriptor(platform: Platform, module_guid: uuid.UUID) -> StubDescriptor:
    """Re-read a module's stub descriptor from the flash model."""
    _, module = platform.desc.find_module(module_guid)
    if module is None:
        raise SimError(f"module {module_guid} not in platform flash")
    descriptor = _descriptor_of_bytes(module.pe_bytes)
    if descriptor is None:
        raise SimError(f"module {module_guid} carries no stub descriptor")
    return descriptor


def smi_invoke(
    platform: Platform, handler_id: str, comm_buffer: CommBuffer
) -> HandlerResult:
    """Raise an SMI: run a registered handler's declarative behavior.

    Handlers validate the communication buffer first; one pointing into
    SMRAM is refused and the violation recorded.
    """
    handler = platform.smi_handlers.get(handler_id)
    if handler is None:
        raise UnknownHandler(f"no SMI handler registered as {handler_id!r}")
    if platform.boot_phase not in (PHASE_DXE, PHASE_RT):
        raise WrongPhase(f"SMI in phase {platform.boot_phase}")
    if not validate_comm_buffer(platform, comm_buffer.addr, comm_buffer.size):
        platform.comm_violations.append(handler_id)
        return HandlerResult(
            handler_id=handler_id,
            ok=False,
            refused=True,
            note="comm buffer overlaps SMRAM",
        )

    if handler.service == SERVICE_ECHO:
        loaded = platform.smram.contents.get(str(handler.owner_guid))
        if loaded is None:
            return HandlerResult(handler_id, ok=False, note="owner not resident")
        off = loaded.sentinel_offset
        return HandlerResult(
            handler_id, ok=True, data=bytes(loaded.text[off : off + 16])
        )

    if handler.service == SERVICE_SEAL_KEY:
        return _seal_key_handler(platform, handler_id, comm_buffer)

    raise SimError(f"handler {handler_id!r} has unknown service {handler.service!r}")


def _seal_key_handler(
    platform: Platform, handler_id: str, comm_buffer: CommBuffer
) -> HandlerResult:
    # payload: wrap IV (16) || wrapped key (32) || new enrolled PCR0 (32)
    payload = comm_buffer.data
    if len(payload) != 80:
        return HandlerResult(handler_id, ok=False, note="bad payload length")
    if platform.smram.agent_key is None:
        return HandlerResult(handler_id, ok=False, note="no current key unsealed")
    wrap_iv, wrapped, new_pcr0 = payload[:16], payload[16:48], payload[48:80]
    plain = decrypt_cbc(SymmetricKey(platform.smram.agent_key), Iv(wrap_iv), wrapped)
    if plain[16:] != b"\x00" * 16:
        return HandlerResult(handler_id, ok=False, note="wrapped key padding check failed")
    platform.smram.pending_new_key = plain[:16]
    platform.smram.pending_new_pcr0 = new_pcr0
    return HandlerResult(handler_id, ok=True)


def _dispatch_order(desc: PlatformDescription) -> list[UefiModule]:
    order: list[UefiModule] = []
    for fv in desc.firmware_volumes:
        by_guid = {m.guid: m for m in fv.modules}
        order.extend(by_guid[g] for g in fv.apriori)
        listed = set(fv.apriori)
        order.extend(m for m in fv.modules if m.guid not in listed)
    return order


def _register_behavior(platform: Platform, module: UefiModule) -> None:
    for guid in module.behavior.protocols:
        platform.protocol_db[guid] = {"owner": str(module.guid)}
    for spec in module.behavior.smi_handlers:
        platform.smi_handlers[spec.id] = SmiHandler(
            id=spec.id, owner_guid=module.guid, service=spec.service
        )


def _load_into_smram(
    platform: Platform, module: UefiModule, descriptor: StubDescriptor | None
) -> LoadedModule | None:
    if module.kind != KIND_SMM:
        return None
    image = _parse_quietly(module.pe_bytes)
    if image is None:
        return None
    try:
        text = pe.find_section(image, ".text")
    except Exception:
        return None
    if descriptor is not None:
        plain_len, cipher_len = descriptor.text_plain_len, descriptor.text_cipher_len
    else:
        plain_len = min(text.virtual_size, text.raw_size)
        cipher_len = plain_len
    loaded = LoadedModule(
        guid=module.guid,
        text=bytearray(text.data),
        text_rva=text.virtual_address,
        plain_len=plain_len,
        cipher_len=cipher_len,
        packed=descriptor is not None,
        sentinel_offset=module.behavior.sentinel_offset,
    )
    platform.smram.contents[str(module.guid)] = loaded
    return loaded


def _dispatch_agent(platform: Platform, module: UefiModule) -> str | None:
    """Unseal the key and install the unpack protocol.

    The agent falls back to the backup NV index so a platform recovering
    from an interrupted update can still come up on its original firmware.
    """
    state = platform.tpm
    cfg = platform.desc.tpm
    key = None
    for index in (cfg.nv_index, cfg.backup_nv_index):
        handle = start_auth_session(state, POLICY)
        try:
            policy_pcr(state, handle, PcrSelection.of(0))
            key = nv_read(state, index, handle)
            break
        except (PolicyMismatch, UnknownIndex, NotWritten):
            continue
        finally:
            flush_session(state, handle)
    if key is None:
        return HALT_UNSEAL_FAILED
    platform.smram.agent_key = key
    platform.protocol_db[str(UNPACK_PROTOCOL_GUID)] = {
        "owner": str(module.guid),
        "service": "unpack",
    }
    platform.smi_handlers[AGENT_SEAL_HANDLER_ID] = SmiHandler(
        id=AGENT_SEAL_HANDLER_ID, owner_guid=module.guid, service=SERVICE_SEAL_KEY
    )
    _register_behavior(platform, module)
    _load_into_smram(platform, module, descriptor=None)
    cap_extend_pcr0(platform)
    return None


def _dispatch_packed(
    platform: Platform, module: UefiModule, descriptor: StubDescriptor
) -> str | None:
    """Run a packed module through its stub: locate the protocol, unpack,
    verify the sentinel, chain to the original entry point."""
    loaded = _load_into_smram(platform, module, descriptor)
    if loaded is None:
        raise SimError(f"packed module {module.guid} must be a loadable SMM module")
    unpack(platform, module.guid, descriptor.text_rva, descriptor.text_cipher_len)
    sentinel = module.behavior.sentinel
    if sentinel is not None:
        off = module.behavior.sentinel_offset
        if bytes(loaded.text[off : off + len(sentinel)]) != sentinel:
            return HALT_SENTINEL_MISMATCH
    # chain to the original entry: the module body runs and registers
    # its declared protocols and handlers
    _register_behavior(platform, module)
    return None


def _dispatch_plain(platform: Platform, module: UefiModule) -> None:
    _load_into_smram(platform, module, descriptor=None)
    _register_behavior(platform, module)
    if module.behavior.smram_dump:
        view = smram_read(platform, actor="smm")
        flat = (view["agent_key"] or b"") + b"".join(sorted(view["texts"].values()))
        platform.scenario_captures.append(flat)


def _power_on(platform: Platform) -> None:
    tpm_reset(platform.tpm)
    platform.smram = SmramRegion(
        base=platform.desc.smram_base, size=platform.desc.smram_size
    )
    platform.protocol_db = {}
    platform.smi_handlers = {}
    platform.boot_phase = PHASE_SEC
    platform.cap_extended = False
    platform.scenario_captures = []
    platform.comm_violations = []


def boot(platform: Platform, pre_lock_hook=None) -> BootResult:
    """Run the full boot flow; an unseal failure halts and is reported in
    the result rather than raised.

    ``pre_lock_hook`` is simulation instrumentation: it is called with the
    platform at the end of DXE dispatch, inside the window where SMRAM is
    populated but not yet locked (the DMA window the scenarios probe).
    """
    _power_on(platform)
    platform.boot_phase = PHASE_PEI
    measure_fvs(platform)
    platform.boot_phase = PHASE_DXE

    dispatched: list[dict] = []
    unpack_events: list[dict] = []
    halted: str | None = HALT_FLASH_CORRUPT if platform.flash_corrupt else None

    if halted is None:
        for module in _dispatch_order(platform.desc):
            descriptor = _descriptor_of_bytes(module.pe_bytes)
            if module.agent:
                halted = _dispatch_agent(platform, module)
                status = "ok" if halted is None else "unseal-failed"
            elif descriptor is not None:
                halted = _dispatch_packed(platform, module, descriptor)
                status = "ok" if halted is None else "sentinel-mismatch"
                unpack_events.append(
                    {
                        "module": str(module.guid),
                        "base": descriptor.text_rva,
                        "size": descriptor.text_cipher_len,
                        "sentinel_ok": halted is None,
                    }
                )
            else:
                _dispatch_plain(platform, module)
                status = "ok"
            dispatched.append(
                {"guid": str(module.guid), "packed": descriptor is not None, "status": status}
            )
            if halted is not None:
                break

    if halted is None:
        if pre_lock_hook is not None:
            pre_lock_hook(platform)
        platform.smram.locked = True
        platform.boot_phase = PHASE_BDS
        platform.boot_phase = PHASE_RT

    return BootResult(
        pcr0_final=platform.tpm.pcrs[0],
        dispatched=dispatched,
        unpack_events=unpack_events,
        halted_reason=halted,
    )


# --- unpack timing ----------------------------------------------------------

@dataclass
class BenchPoint:
    size: int
    mean_seconds: float
    per_byte_seconds: float | None


def bench_unpack(
    sizes: list[int], repetitions: int = 5, _amortize_bytes: int = 2_000_000
) -> list[BenchPoint]:
    """Mean decrypt duration per text-section size, plus per-byte cost.

    Each sample decrypts many concatenated sections in one call and divides
    by the count, which amortizes per-call dispatch overhead below timer
    resolution; samples are interleaved across sizes so host noise spreads
    evenly. Zero-byte sections report a zero duration and are excluded from
    per-byte statistics.
    """
    if not sizes:
        raise ValueError("need at least one size")
    if repetitions < 5:
        raise ValueError("need at least five repetitions")
    key = SymmetricKey(bytes(range(16)))
    iv = Iv(bytes(16))

    buffers: dict[int, tuple[bytes, int]] = {}
    for size in sizes:
        if size <= 0:
            continue
        block = bytes(size + (-size) % 16)
        count = max(1, _amortize_bytes // len(block))
        buffers[size] = (block * count, count)
        decrypt_cbc(key, iv, buffers[size][0])  # warmup

    samples: dict[int, list[float]] = {size: [] for size in buffers}
    for _ in range(repetitions):
        for size, (buf, count) in buffers.items():
            start = time.perf_counter()
            decrypt_cbc(key, iv, buf)
            samples[size].append((time.perf_counter() - start) / count)

    points = []
    for size in sizes:
        if size <= 0:
            points.append(BenchPoint(size=size, mean_seconds=0.0, per_byte_seconds=None))
            continue
        mean = sum(samples[size]) / len(samples[size])
        points.append(
            BenchPoint(size=size, mean_seconds=mean, per_byte_seconds=mean / size)
        )
    return points
