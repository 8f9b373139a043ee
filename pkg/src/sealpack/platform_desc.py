"""Platform description files: the boot simulator's input schema.

A description is a versioned JSON document listing the SPI flash contents
(firmware volumes in measurement order), the TPM configuration, and the
platform security flags::

    {
      "version": 1,
      "tpm": {
        "nv_index": "0x01500020",        # sealed key slot (int or hex string)
        "backup_nv_index": "0x01500021", # optional, defaults to nv_index + 1
        "state_file": "tpm-state.json",  # optional, relative to this file
        "cap_extend": false              # extend PCR0 after a successful unseal
      },
      "security": {
        "dpr_enabled": false, "memory_scrambling": false,
        "mor_bit": true, "tme_enabled": false
      },
      "smram": {"base": 2130706432, "size": 8388608},   # optional
      "firmware_volumes": [
        {
          "name": "FV_MAIN",
          "apriori": ["<module guid>", ...],
          "modules": [
            {
              "guid": "11111111-2222-3333-4444-555555555555",
              "kind": "smm",                  # or "dxe"
              "path": "modules/agent.efi",    # relative to this file
              "agent": true,                  # unseals the key, installs Unpack
              "behavior": {
                "protocols": ["<guid>", ...],
                "smi_handlers": [{"id": "test", "service": "echo"}],
                "sentinel": "<hex>",          # plaintext marker in .text
                "sentinel_offset": 16,
                "smram_dump": false           # scenario instrumentation
              }
            }
          ]
        }
      ]
    }

Only DXE-phase volumes are listed; SEC/PEI content is immutable by
assumption and lives outside the description.

Measurement canonicalization. A volume is measured as SHA-256 over its
canonical serialization::

    u32le apriori_count, then each apriori GUID (16 bytes, RFC 4122 order),
    u32le module_count, then per module: GUID (16 bytes), u32le length,
    module file bytes.

This layout is fixed; it is what makes every PCR value this package
produces reproducible by outside tooling.
"""

from __future__ import annotations

import json
import struct
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidPlatformDescription

DESCRIPTION_VERSION = 1

DEFAULT_NV_INDEX = 0x01500020
DEFAULT_SMRAM_BASE = 0x7F000000
DEFAULT_SMRAM_SIZE = 0x00800000

KIND_DXE = "dxe"
KIND_SMM = "smm"

SERVICE_ECHO = "echo"
SERVICE_SEAL_KEY = "seal_key"


@dataclass
class SmiHandlerSpec:
    id: str
    service: str


@dataclass
class ModuleBehavior:
    """Declarative payload: what the module does when dispatched."""

    protocols: list[str] = field(default_factory=list)
    smi_handlers: list[SmiHandlerSpec] = field(default_factory=list)
    sentinel: bytes | None = None
    sentinel_offset: int = 16
    smram_dump: bool = False


@dataclass
class UefiModule:
    guid: uuid.UUID
    kind: str
    pe_bytes: bytes
    behavior: ModuleBehavior = field(default_factory=ModuleBehavior)
    agent: bool = False
    path: str | None = None


@dataclass
class FirmwareVolume:
    name: str
    apriori: list[uuid.UUID] = field(default_factory=list)
    modules: list[UefiModule] = field(default_factory=list)

    def measurement_bytes(self) -> bytes:
        """Canonical serialization hashed for the PCR0 measurement."""
        parts = [struct.pack("<I", len(self.apriori))]
        parts += [g.bytes for g in self.apriori]
        parts.append(struct.pack("<I", len(self.modules)))
        for module in self.modules:
            parts.append(module.guid.bytes)
            parts.append(struct.pack("<I", len(module.pe_bytes)))
            parts.append(module.pe_bytes)
        return b"".join(parts)


@dataclass
class SecurityFlags:
    dpr_enabled: bool = False
    memory_scrambling: bool = False
    mor_bit: bool = True
    tme_enabled: bool = False


@dataclass
class TpmConfig:
    nv_index: int = DEFAULT_NV_INDEX
    backup_nv_index: int = DEFAULT_NV_INDEX + 1
    state_file: Path | None = None
    cap_extend: bool = False


@dataclass
class PlatformDescription:
    firmware_volumes: list[FirmwareVolume]
    tpm: TpmConfig = field(default_factory=TpmConfig)
    security: SecurityFlags = field(default_factory=SecurityFlags)
    smram_base: int = DEFAULT_SMRAM_BASE
    smram_size: int = DEFAULT_SMRAM_SIZE

    def find_module(self, guid: uuid.UUID):
        for fv in self.firmware_volumes:
            for module in fv.modules:
                if module.guid == guid:
                    return fv, module
        return None, None

    def all_modules(self):
        for fv in self.firmware_volumes:
            yield from fv.modules


def _parse_index(value, what: str) -> int:
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        try:
            return int(value, 0)
        except ValueError:
            pass
    raise InvalidPlatformDescription(f"{what} must be an integer or hex string")


def _parse_guid(value, where: str) -> uuid.UUID:
    try:
        return uuid.UUID(str(value))
    except ValueError:
        raise InvalidPlatformDescription(f"bad GUID {value!r} in {where}") from None


def _parse_behavior(doc, where: str) -> ModuleBehavior:
    behavior = ModuleBehavior()
    if doc is None:
        return behavior
    if not isinstance(doc, dict):
        raise InvalidPlatformDescription(f"behavior of {where} must be an object")
    behavior.protocols = [str(_parse_guid(g, where)) for g in doc.get("protocols", [])]
    for h in doc.get("smi_handlers", []):
        service = h.get("service", SERVICE_ECHO)
        if service not in (SERVICE_ECHO, SERVICE_SEAL_KEY):
            raise InvalidPlatformDescription(
                f"unknown SMI handler service {service!r} in {where}"
            )
        behavior.smi_handlers.append(SmiHandlerSpec(id=str(h["id"]), service=service))
    if "sentinel" in doc and doc["sentinel"] is not None:
        try:
            behavior.sentinel = bytes.fromhex(doc["sentinel"])
        except ValueError:
            raise InvalidPlatformDescription(f"bad sentinel hex in {where}") from None
        if len(behavior.sentinel) < 4:
            raise InvalidPlatformDescription(f"sentinel in {where} shorter than 4 bytes")
    behavior.sentinel_offset = int(doc.get("sentinel_offset", 16))
    behavior.smram_dump = bool(doc.get("smram_dump", False))
    return behavior


def _parse_module(doc, base_dir: Path, where: str) -> UefiModule:
    guid = _parse_guid(doc.get("guid"), where)
    kind = doc.get("kind")
    if kind not in (KIND_DXE, KIND_SMM):
        raise InvalidPlatformDescription(f"module {guid} kind must be dxe or smm")
    path = doc.get("path")
    if "pe_hex" in doc:
        pe_bytes = bytes.fromhex(doc["pe_hex"])
    elif path:
        file_path = (base_dir / path).resolve()
        if not file_path.is_file():
            raise InvalidPlatformDescription(f"module file {file_path} does not exist")
        pe_bytes = file_path.read_bytes()
    else:
        raise InvalidPlatformDescription(f"module {guid} needs a path or pe_hex")
    if not pe_bytes:
        raise InvalidPlatformDescription(f"module {guid} file is empty")
    return UefiModule(
        guid=guid,
        kind=kind,
        pe_bytes=pe_bytes,
        behavior=_parse_behavior(doc.get("behavior"), f"module {guid}"),
        agent=bool(doc.get("agent", False)),
        path=path,
    )


def _parse_fv(doc, base_dir: Path) -> FirmwareVolume:
    name = doc.get("name")
    if not name:
        raise InvalidPlatformDescription("firmware volume needs a name")
    modules = [
        _parse_module(m, base_dir, f"FV {name}") for m in doc.get("modules", [])
    ]
    module_guids = {m.guid for m in modules}
    apriori = [_parse_guid(g, f"apriori of FV {name}") for g in doc.get("apriori", [])]
    for g in apriori:
        if g not in module_guids:
            raise InvalidPlatformDescription(
                f"apriori GUID {g} of FV {name} matches no module"
            )
    if len(apriori) != len(set(apriori)):
        raise InvalidPlatformDescription(f"duplicate apriori entry in FV {name}")
    return FirmwareVolume(name=name, apriori=apriori, modules=modules)


def _validate(desc: PlatformDescription) -> None:
    if not desc.firmware_volumes:
        raise InvalidPlatformDescription("platform lists no firmware volumes")
    seen: set[uuid.UUID] = set()
    agents = 0
    for fv in desc.firmware_volumes:
        if not fv.modules:
            raise InvalidPlatformDescription(f"FV {fv.name} lists no modules")
        for module in fv.modules:
            if module.guid in seen:
                raise InvalidPlatformDescription(f"duplicate module GUID {module.guid}")
            seen.add(module.guid)
            agents += module.agent
    if agents > 1:
        raise InvalidPlatformDescription("more than one unpack agent declared")


def load_platform_description(path: str | Path) -> PlatformDescription:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidPlatformDescription(f"cannot read {path}: {exc}") from None
    if doc.get("version") != DESCRIPTION_VERSION:
        raise InvalidPlatformDescription(
            f"unsupported description version {doc.get('version')!r}"
        )
    base_dir = path.parent

    tpm_doc = doc.get("tpm", {})
    nv_index = _parse_index(tpm_doc.get("nv_index", DEFAULT_NV_INDEX), "nv_index")
    backup = _parse_index(
        tpm_doc.get("backup_nv_index", nv_index + 1), "backup_nv_index"
    )
    state_file = tpm_doc.get("state_file")
    tpm_cfg = TpmConfig(
        nv_index=nv_index,
        backup_nv_index=backup,
        state_file=(base_dir / state_file).resolve() if state_file else None,
        cap_extend=bool(tpm_doc.get("cap_extend", False)),
    )

    sec_doc = doc.get("security", {})
    security = SecurityFlags(
        dpr_enabled=bool(sec_doc.get("dpr_enabled", False)),
        memory_scrambling=bool(sec_doc.get("memory_scrambling", False)),
        mor_bit=bool(sec_doc.get("mor_bit", True)),
        tme_enabled=bool(sec_doc.get("tme_enabled", False)),
    )

    smram_doc = doc.get("smram", {})
    desc = PlatformDescription(
        firmware_volumes=[_parse_fv(f, base_dir) for f in doc.get("firmware_volumes", [])],
        tpm=tpm_cfg,
        security=security,
        smram_base=int(smram_doc.get("base", DEFAULT_SMRAM_BASE)),
        smram_size=int(smram_doc.get("size", DEFAULT_SMRAM_SIZE)),
    )
    _validate(desc)
    return desc


def load_recovery_fv(path: str | Path) -> FirmwareVolume:
    """Load a standalone recovery DXE volume (same FV schema as above)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidPlatformDescription(f"cannot read {path}: {exc}") from None
    if doc.get("version") != DESCRIPTION_VERSION:
        raise InvalidPlatformDescription(
            f"unsupported recovery FV version {doc.get('version')!r}"
        )
    return _parse_fv(doc, path.parent)
