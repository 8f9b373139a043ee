"""Attack-scenario engine: scripted module-acquisition attempts.

Each scenario deep-copies the platform, performs one attacker's actions, and
reports what the attacker walked away with. ``prevented`` is computed from
the loot, never asserted: a scenario is prevented exactly when the attacker
obtained neither the key nor any packed module's plaintext.

Threat classes: 1 = BIOS update file only, 2 = arbitrary code above the OS,
3 = hardware access and equipment. SEC/PEI content is immutable by
construction (hardware-verified early boot), so the engine only expresses
DXE-level injections.
"""

from __future__ import annotations

import copy
import hashlib
import json
import uuid
from dataclasses import dataclass

from . import tpm
from .bootsim import Platform, SmramAccessDenied, boot, smram_read
from .errors import PolicyMismatch, TrialSessionNotAllowed, UnknownScenario
from .platform_desc import KIND_SMM, ModuleBehavior, UefiModule

# Measurement the firmware folds into PCR0 when handing off to the OS
# (separator event over four zero bytes). Modeled inside the runtime
# scenarios so boot results keep the early-DXE PCR0 value.
OS_HANDOFF_MEASUREMENT = hashlib.sha256(b"\x00\x00\x00\x00").digest()

ATTACKER_MODULE_GUID = uuid.UUID("deadbeef-0000-4000-8000-000000000bad")

# DDR3/DDR4 modules struggle to retain content beyond about a minute even
# when cooled; rewriting a SPI flash chip takes several minutes.
RETENTION_SECONDS = 60
REFLASH_SECONDS = 300
TRANSPLANT_SECONDS = 30


@dataclass(frozen=True)
class ScenarioOutcome:
    scenario_name: str
    attacker_class: int
    obtained_plaintext_module: bool
    obtained_key: bool

    @property
    def prevented(self) -> bool:
        return not (self.obtained_plaintext_module or self.obtained_key)

    def to_dict(self) -> dict:
        return {
            "scenario_name": self.scenario_name,
            "attacker_class": self.attacker_class,
            "obtained_plaintext_module": self.obtained_plaintext_module,
            "obtained_key": self.obtained_key,
            "prevented": self.prevented,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _protected_sentinels(platform: Platform) -> list[bytes]:
    """Plaintext markers of the packed modules: the assets under protection."""
    from .packer import is_packed
    from .errors import NotAPe

    sentinels = []
    for module in platform.desc.all_modules():
        if module.behavior.sentinel is None:
            continue
        try:
            if is_packed(module.pe_bytes):
                sentinels.append(module.behavior.sentinel)
        except NotAPe:
            continue
    return sentinels


def _sealed_keys(platform: Platform) -> list[bytes]:
    cfg = platform.desc.tpm
    keys = []
    for index in (cfg.nv_index, cfg.backup_nv_index):
        slot = platform.tpm.nv.get(index)
        if slot is not None and slot.written:
            keys.append(slot.data)
    return keys


def _assess(platform: Platform, name: str, attacker_class: int, loot: list[bytes]) -> ScenarioOutcome:
    blob = b"\x00".join(loot)
    sentinels = _protected_sentinels(platform)
    keys = _sealed_keys(platform)
    return ScenarioOutcome(
        scenario_name=name,
        attacker_class=attacker_class,
        obtained_plaintext_module=any(s in blob for s in sentinels),
        obtained_key=any(k in blob for k in keys),
    )


def _flash_image(platform: Platform) -> bytes:
    return b"".join(fv.measurement_bytes() for fv in platform.desc.firmware_volumes)


def _smram_residual(platform: Platform) -> bytes:
    view = smram_read(platform, actor="smm")
    return (view["agent_key"] or b"") + b"".join(sorted(view["texts"].values()))


def _attempt_unseal(platform: Platform) -> bytes | None:
    state = platform.tpm
    handle = tpm.start_auth_session(state, tpm.POLICY)
    try:
        tpm.policy_pcr(state, handle, tpm.PcrSelection.of(0))
        return tpm.nv_read(state, platform.desc.tpm.nv_index, handle)
    except (PolicyMismatch, TrialSessionNotAllowed):
        return None
    finally:
        tpm.flush_session(state, handle)


# --- the ten acquisition methods -------------------------------------------

def _bios_update_file(platform: Platform) -> list[bytes]:
    # the distributed image carries every packed module in encrypted form
    return [_flash_image(platform)]


def _spi_flash_dump_software(platform: Platform) -> list[bytes]:
    boot(platform)
    return [_flash_image(platform)]


def _tpm_key_read_software(platform: Platform) -> list[bytes]:
    boot(platform)
    # OS handoff has extended PCR0 past the enrolled state by the time
    # runtime tooling can talk to the TPM (the cap extension, when enabled,
    # already did so during DXE)
    tpm.pcr_extend(platform.tpm, 0, OS_HANDOFF_MEASUREMENT)
    key = _attempt_unseal(platform)
    return [key] if key is not None else []


def _memory_dump_from_os(platform: Platform) -> list[bytes]:
    boot(platform)
    try:
        return [_smram_residual_as(platform, actor="os")]
    except SmramAccessDenied:
        return []


def _smram_residual_as(platform: Platform, actor: str) -> bytes:
    view = smram_read(platform, actor=actor)
    return (view["agent_key"] or b"") + b"".join(sorted(view["texts"].values()))


def _spi_flash_dump_hardware(platform: Platform) -> list[bytes]:
    # desoldered or in-circuit chip read: same encrypted image bytes
    return [_flash_image(platform)]


def _tpm_key_read_hardware(platform: Platform) -> list[bytes]:
    # tamper resistance assumed: physical extraction out of reach
    return []


def _smram_read_from_smm_module(platform: Platform) -> list[bytes]:
    # Flash a dumper SMM module into the first volume, scheduled ahead of
    # everything else. Reusing an existing unpacked module body keeps it
    # dispatchable; any addition changes the volume measurement regardless.
    donor = next(
        (m for m in platform.desc.all_modules() if m.agent), None
    ) or next(iter(platform.desc.firmware_volumes[0].modules))
    dumper = UefiModule(
        guid=ATTACKER_MODULE_GUID,
        kind=KIND_SMM,
        pe_bytes=donor.pe_bytes,
        behavior=ModuleBehavior(smram_dump=True),
    )
    fv = platform.desc.firmware_volumes[0]
    fv.modules.insert(0, dumper)
    fv.apriori.insert(0, dumper.guid)
    result = boot(platform)
    assert result.halted_reason is not None  # changed measurement halts boot
    return list(platform.scenario_captures)


def _dma(platform: Platform) -> list[bytes]:
    loot: list[bytes] = []

    def probe(p: Platform) -> None:
        try:
            loot.append(_smram_residual_as(p, actor="dma"))
        except SmramAccessDenied:
            pass

    boot(platform, pre_lock_hook=probe)
    return loot


def _coldboot_same_device(platform: Platform) -> list[bytes]:
    boot(platform)
    residual = _smram_residual(platform)
    # unclean power-off arms the memory overwrite request; rewriting the
    # flash with a dumper module takes far longer than cells retain data
    if platform.desc.security.mor_bit:
        residual = b""
    if REFLASH_SECONDS > RETENTION_SECONDS:
        residual = b""
    return [residual] if residual else []


def _coldboot_memory_transplant(platform: Platform) -> list[bytes]:
    boot(platform)
    residual = _smram_residual(platform)
    # target machine had its MOR bit pre-cleared by a clean shutdown, and
    # the swap fits inside the retention window
    if TRANSPLANT_SECONDS > RETENTION_SECONDS:
        return []
    if platform.desc.security.tme_enabled:
        # cells hold SoC-encrypted data; descrambling alone does not help
        return []
    return [residual] if residual else []


_SCENARIOS: dict[str, tuple[int, callable]] = {
    "bios_update_file": (1, _bios_update_file),
    "spi_flash_dump_software": (2, _spi_flash_dump_software),
    "tpm_key_read_software": (2, _tpm_key_read_software),
    "memory_dump_from_os": (2, _memory_dump_from_os),
    "spi_flash_dump_hardware": (3, _spi_flash_dump_hardware),
    "tpm_key_read_hardware": (3, _tpm_key_read_hardware),
    "smram_read_from_smm_module": (3, _smram_read_from_smm_module),
    "dma": (3, _dma),
    "coldboot_same_device": (3, _coldboot_same_device),
    "coldboot_memory_transplant": (3, _coldboot_memory_transplant),
}

SCENARIO_NAMES = tuple(_SCENARIOS)


def run_scenario(platform: Platform, name: str) -> ScenarioOutcome:
    """Execute one scripted acquisition attempt against a copy of the
    platform and report the outcome."""
    if name not in _SCENARIOS:
        raise UnknownScenario(f"no scenario named {name!r}")
    attacker_class, script = _SCENARIOS[name]
    working_copy = copy.deepcopy(platform)
    loot = script(working_copy)
    return _assess(working_copy, name, attacker_class, loot)


def run_all(platform: Platform) -> list[ScenarioOutcome]:
    return [run_scenario(platform, name) for name in SCENARIO_NAMES]
