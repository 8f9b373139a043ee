"""Module packing: encrypt a PE module's text section, append the decrypt
stub section, retarget the entry point; plus the key-sealing provisioning
flow and the enrolled-PCR calculator.

The appended ``.ext`` section carries a fixed 64-byte descriptor instead of
executable stub code: this artifact has no instruction-level execution
environment, so the boot simulator interprets the descriptor to drive the
same sequence a real stub would (look up the unpack protocol by GUID, pass
the text base and cipher length, chain to the original entry point).
"""

from __future__ import annotations

import hashlib
import secrets
import struct
import uuid
from dataclasses import dataclass
from random import Random

from . import pe, tpm
from .cipher import BLOCK_SIZE, KEY_SIZE, Iv, SymmetricKey, encrypt_cbc
from .errors import (
    AlreadyPacked,
    InvalidPlatformDescription,
    MalformedHeader,
    NoSlackForPadding,
    NoTextSection,
    NotAPe,
    SectionNotFound,
)
from .platform_desc import PlatformDescription

STUB_MAGIC = b"SPK1"
STUB_VERSION = 1
STUB_SECTION = ".ext"
TEXT_SECTION = ".text"

# magic, version, original entry, text rva, cipher len, plain len, iv, guid
_STUB_FMT = "<4sHIIII16s16s"
STUB_CONTENT_SIZE = struct.calcsize(_STUB_FMT)
STUB_DESCRIPTOR_SIZE = 64  # content plus reserved zero padding

# Protocol identity the decrypt stub uses to locate the unpack service.
UNPACK_PROTOCOL_GUID = uuid.UUID("a9f6b2c1-4a0d-4f2e-9c3b-6d5e8f172a40")

STUB_CHARACTERISTICS = pe.SCN_CNT_CODE | pe.SCN_MEM_EXECUTE | pe.SCN_MEM_READ


@dataclass(frozen=True)
class StubDescriptor:
    original_entry_rva: int
    text_rva: int
    text_cipher_len: int
    text_plain_len: int
    iv: bytes
    protocol_guid: uuid.UUID
    version: int = STUB_VERSION

    def __post_init__(self):
        if not self.text_plain_len <= self.text_cipher_len < self.text_plain_len + BLOCK_SIZE:
            raise ValueError("cipher length must be the padded plain length")

    def to_bytes(self) -> bytes:
        content = struct.pack(
            _STUB_FMT,
            STUB_MAGIC,
            self.version,
            self.original_entry_rva,
            self.text_rva,
            self.text_cipher_len,
            self.text_plain_len,
            self.iv,
            self.protocol_guid.bytes,
        )
        return content.ljust(STUB_DESCRIPTOR_SIZE, b"\x00")

    @classmethod
    def from_bytes(cls, data: bytes) -> "StubDescriptor":
        if len(data) < STUB_CONTENT_SIZE or data[:4] != STUB_MAGIC:
            raise ValueError("not a stub descriptor")
        magic, version, entry, text_rva, clen, plen, iv, guid = struct.unpack_from(
            _STUB_FMT, data
        )
        return cls(
            original_entry_rva=entry,
            text_rva=text_rva,
            text_cipher_len=clen,
            text_plain_len=plen,
            iv=iv,
            protocol_guid=uuid.UUID(bytes=guid),
            version=version,
        )


@dataclass(frozen=True)
class PackReport:
    module_name: str
    text_size_bytes: int
    stub_section_raw_size: int
    size_overhead_bytes: int
    packed: bool


def _parse_or_not_a_pe(pe_bytes: bytes) -> pe.PeImage:
    try:
        return pe.parse_pe(pe_bytes)
    except MalformedHeader as exc:
        raise NotAPe(str(exc)) from None


def _stub_descriptor_of(image: pe.PeImage) -> StubDescriptor | None:
    try:
        ext = pe.find_section(image, STUB_SECTION)
    except SectionNotFound:
        return None
    if ext.data[:4] != STUB_MAGIC:
        return None
    return StubDescriptor.from_bytes(ext.data)


def pack_module(
    pe_bytes: bytes,
    key: SymmetricKey,
    rng_seed: int | None = None,
    module_name: str = "",
) -> tuple[bytes, PackReport]:
    """Encrypt the text section in place and append the stub section.

    The plaintext is zero padded up to a cipher block multiple inside the
    text section's existing raw slack; a text section too full to absorb the
    padding is an error rather than a truncated encryption. A fresh random
    IV is drawn per pack (deterministic when ``rng_seed`` is given) and
    stored in the descriptor, so the key stays the only secret.
    """
    image = _parse_or_not_a_pe(pe_bytes)
    if _stub_descriptor_of(image) is not None:
        raise AlreadyPacked("module already carries a stub section")
    try:
        text = pe.find_section(image, TEXT_SECTION)
    except SectionNotFound:
        raise NoTextSection("module has no .text section") from None

    plain_len = min(text.virtual_size, text.raw_size)
    cipher_len = pe.align_up(plain_len, BLOCK_SIZE)
    if cipher_len > text.raw_size:
        raise NoSlackForPadding(
            f"text section has {text.raw_size - plain_len} slack bytes, "
            f"{cipher_len - plain_len} needed"
        )

    iv = Random(rng_seed).randbytes(16) if rng_seed is not None else secrets.token_bytes(16)
    ciphertext = encrypt_cbc(
        key, Iv(iv), text.data[:plain_len] + b"\x00" * (cipher_len - plain_len)
    )
    image = pe.replace_section_data(
        image, TEXT_SECTION, ciphertext + text.data[cipher_len:]
    )

    descriptor = StubDescriptor(
        original_entry_rva=image.entry_point_rva,
        text_rva=text.virtual_address,
        text_cipher_len=cipher_len,
        text_plain_len=plain_len,
        iv=iv,
        protocol_guid=UNPACK_PROTOCOL_GUID,
    )
    image = pe.append_section(
        image, STUB_SECTION, descriptor.to_bytes(), STUB_CHARACTERISTICS
    )
    ext = pe.find_section(image, STUB_SECTION)
    image = pe.set_entry_point(image, ext.virtual_address)

    report = PackReport(
        module_name=module_name,
        text_size_bytes=plain_len,
        stub_section_raw_size=ext.raw_size,
        size_overhead_bytes=ext.raw_size,
        packed=True,
    )
    return pe.serialize_pe(image), report


def is_packed(pe_bytes: bytes) -> bool:
    return _stub_descriptor_of(_parse_or_not_a_pe(pe_bytes)) is not None


def inspect_module(pe_bytes: bytes, module_name: str = "") -> PackReport:
    image = _parse_or_not_a_pe(pe_bytes)
    descriptor = _stub_descriptor_of(image)
    if descriptor is not None:
        ext = pe.find_section(image, STUB_SECTION)
        return PackReport(
            module_name=module_name,
            text_size_bytes=descriptor.text_plain_len,
            stub_section_raw_size=ext.raw_size,
            size_overhead_bytes=ext.raw_size,
            packed=True,
        )
    try:
        text = pe.find_section(image, TEXT_SECTION)
        text_size = min(text.virtual_size, text.raw_size)
    except SectionNotFound:
        text_size = 0
    return PackReport(
        module_name=module_name,
        text_size_bytes=text_size,
        stub_section_raw_size=0,
        size_overhead_bytes=0,
        packed=False,
    )


def size_overhead_model(
    module_count: int, stub_section_raw_size: int, agent_module_size: int
) -> int:
    """Total flash growth: one agent module plus one stub section per
    packed module. Linear in the module count by construction."""
    return agent_module_size + module_count * stub_section_raw_size


def trial_policy_digest(pcr0_value: bytes) -> bytes:
    """Policy digest a PCR0-bound session would accumulate at that value.

    Runs the enrollment trial session against a scratch TPM whose PCR0 holds
    the given value, exactly as the provisioning flow does.
    """
    scratch = tpm.TpmState()
    scratch.pcrs[0] = pcr0_value
    handle = tpm.start_auth_session(scratch, tpm.TRIAL)
    tpm.policy_pcr(scratch, handle, tpm.PcrSelection.of(0))
    return tpm.policy_get_digest(scratch, handle)


def seal_key(
    state: tpm.TpmState, nv_index: int, key: SymmetricKey, enrolled_pcr0: bytes
) -> None:
    """Provision the key: trial session over the enrolled PCR0 state, define
    an NV slot gated on the resulting digest, write the key bytes."""
    digest = trial_policy_digest(enrolled_pcr0)
    tpm.nv_define_space(state, nv_index, KEY_SIZE, digest)
    tpm.nv_write(state, nv_index, key.key_bytes)


def compute_enrolled_pcr0(description: PlatformDescription) -> bytes:
    """PCR0 at unpack-agent execution time: the PEI measurement chain over
    the platform's volumes, before any optional cap extension."""
    if not description.firmware_volumes:
        raise InvalidPlatformDescription("platform lists no firmware volumes")
    value = tpm.ZERO_DIGEST
    for fv in description.firmware_volumes:
        measurement = hashlib.sha256(fv.measurement_bytes()).digest()
        value = hashlib.sha256(value + measurement).digest()
    return value
