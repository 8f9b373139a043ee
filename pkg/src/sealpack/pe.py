"""PE32+ image parsing, editing, and re-serialization.

The parser accepts canonically laid out 64-bit images: a header region
followed by contiguous, file-aligned section data with no trailing bytes.
Everything in the header region that is not explicitly modeled (DOS stub,
data directories, linker versions, ...) is preserved verbatim as an opaque
byte blob, which is what guarantees ``serialize(parse(b)) == b``.

Edits never mutate; they return new ``PeImage`` values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

from .errors import (
    DuplicateSectionName,
    MalformedHeader,
    NoHeaderSpace,
    RvaOutOfRange,
    SectionNotFound,
)

DOS_MAGIC = b"MZ"
PE_SIGNATURE = b"PE\x00\x00"
MACHINE_AMD64 = 0x8664
PE32PLUS_MAGIC = 0x20B

COFF_SIZE = 20
OPT_FIXED_SIZE = 112
SECTION_ENTRY_SIZE = 40
SECTION_ENTRY_FMT = "<8sIIIIIIHHI"

# IMAGE_SCN_* flags used by this package
SCN_CNT_CODE = 0x00000020
SCN_CNT_INITIALIZED_DATA = 0x00000040
SCN_MEM_EXECUTE = 0x20000000
SCN_MEM_READ = 0x40000000
SCN_MEM_WRITE = 0x80000000


def align_up(value: int, alignment: int) -> int:
    return (value + alignment - 1) & ~(alignment - 1)


def section_name_bytes(name: str | bytes) -> bytes:
    """Normalize a section name to the padded 8-byte table form."""
    raw = name.encode("ascii") if isinstance(name, str) else name
    if not 0 < len(raw) <= 8:
        raise ValueError(f"section name must be 1..8 bytes, got {raw!r}")
    return raw.ljust(8, b"\x00")


@dataclass(frozen=True)
class Section:
    name: bytes  # 8 bytes, NUL padded
    virtual_address: int
    virtual_size: int
    raw_offset: int
    raw_size: int
    characteristics: int
    data: bytes

    def __post_init__(self):
        if len(self.name) != 8:
            raise ValueError("section name must be exactly 8 bytes")
        if len(self.data) != self.raw_size:
            raise ValueError("section data length must equal raw_size")

    @property
    def executable(self) -> bool:
        return bool(self.characteristics & SCN_MEM_EXECUTE)

    def contains_rva(self, rva: int) -> bool:
        return self.virtual_address <= rva < self.virtual_address + self.virtual_size

    def table_entry(self) -> bytes:
        return struct.pack(
            SECTION_ENTRY_FMT,
            self.name,
            self.virtual_size,
            self.virtual_address,
            self.raw_size,
            self.raw_offset,
            0,
            0,
            0,
            0,
            self.characteristics,
        )


@dataclass(frozen=True, eq=False)
class PeImage:
    machine: int
    entry_point_rva: int
    section_alignment: int
    file_alignment: int
    size_of_image: int
    sections: tuple[Section, ...]
    raw_headers: bytes  # entire file region before the first section's data
    checksum_present: bool  # nonzero checksum seen at parse; recompute on write

    # Opaque-region fidelity means the serialized form is the canonical
    # identity of an image; two images are the same file or they are not.
    def __eq__(self, other):
        if not isinstance(other, PeImage):
            return NotImplemented
        return serialize_pe(self) == serialize_pe(other)

    def __hash__(self):
        return hash(serialize_pe(self))


class _HeaderLayout:
    """Byte offsets of the modeled fields inside the header blob."""

    def __init__(self, blob: bytes):
        if len(blob) < 0x40 or blob[:2] != DOS_MAGIC:
            raise MalformedHeader("missing MZ header")
        (e_lfanew,) = struct.unpack_from("<I", blob, 0x3C)
        if e_lfanew + 4 + COFF_SIZE + OPT_FIXED_SIZE > len(blob):
            raise MalformedHeader("PE header offset out of range")
        if blob[e_lfanew : e_lfanew + 4] != PE_SIGNATURE:
            raise MalformedHeader("missing PE signature")
        self.coff = e_lfanew + 4
        self.opt = self.coff + COFF_SIZE
        (self.size_of_optional,) = struct.unpack_from("<H", blob, self.coff + 16)
        if self.size_of_optional < OPT_FIXED_SIZE:
            raise MalformedHeader("optional header too small")
        self.table = self.opt + self.size_of_optional

    # field offsets relative to blob start
    @property
    def machine_off(self):
        return self.coff

    @property
    def num_sections_off(self):
        return self.coff + 2

    @property
    def opt_magic_off(self):
        return self.opt

    @property
    def entry_off(self):
        return self.opt + 16

    @property
    def section_align_off(self):
        return self.opt + 32

    @property
    def file_align_off(self):
        return self.opt + 36

    @property
    def size_of_image_off(self):
        return self.opt + 56

    @property
    def size_of_headers_off(self):
        return self.opt + 60

    @property
    def checksum_off(self):
        return self.opt + 64


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def pe_checksum(data: bytes, checksum_offset: int) -> int:
    """Standard PE checksum (imagehlp CheckSumMappedFile algorithm)."""
    total = 0
    length = len(data)
    for i in range(0, length, 4):
        if i == checksum_offset:
            continue
        chunk = data[i : i + 4]
        if len(chunk) < 4:
            chunk = chunk + b"\x00" * (4 - len(chunk))
        total += struct.unpack("<I", chunk)[0]
        if total >= 2**32:
            total = (total & 0xFFFFFFFF) + (total >> 32)
    total = (total & 0xFFFF) + (total >> 16)
    total = total + (total >> 16)
    return (total & 0xFFFF) + length


def parse_pe(data: bytes) -> PeImage:
    """Parse a PE32+ image; raises MalformedHeader for anything else."""
    if len(data) < 0x40:
        raise MalformedHeader("input shorter than a DOS header")
    layout = _HeaderLayout(data)

    (machine, num_sections) = struct.unpack_from("<HH", data, layout.machine_off)
    if machine != MACHINE_AMD64:
        raise MalformedHeader(f"unsupported machine 0x{machine:04x}; PE32+ x86-64 only")
    if num_sections == 0:
        raise MalformedHeader("image has no sections")

    (opt_magic,) = struct.unpack_from("<H", data, layout.opt_magic_off)
    if opt_magic != PE32PLUS_MAGIC:
        raise MalformedHeader(f"optional header magic 0x{opt_magic:04x} is not PE32+")

    (entry_rva,) = struct.unpack_from("<I", data, layout.entry_off)
    (section_align, file_align) = struct.unpack_from(
        "<II", data, layout.section_align_off
    )
    (size_of_image, size_of_headers) = struct.unpack_from(
        "<II", data, layout.size_of_image_off
    )
    (checksum,) = struct.unpack_from("<I", data, layout.checksum_off)

    if not _is_pow2(file_align) or not 16 <= file_align <= 0x10000:
        raise MalformedHeader(f"bad file alignment 0x{file_align:x}")
    if not _is_pow2(section_align) or section_align < file_align:
        raise MalformedHeader(f"bad section alignment 0x{section_align:x}")

    table_end = layout.table + num_sections * SECTION_ENTRY_SIZE
    if table_end > size_of_headers or table_end > len(data):
        raise MalformedHeader("section table truncated")

    entries = [
        struct.unpack_from(SECTION_ENTRY_FMT, data, layout.table + i * SECTION_ENTRY_SIZE)
        for i in range(num_sections)
    ]

    sections = []
    prev_virtual_end = 0
    expected_raw = None
    for name, vsize, va, rsize, roff, _pr, _pl, _nr, _nl, chars in entries:
        if vsize == 0 or rsize == 0:
            raise MalformedHeader(f"degenerate section {name!r}")
        if va % section_align or roff % file_align or rsize % file_align:
            raise MalformedHeader(f"section {name!r} violates alignment")
        if va < prev_virtual_end:
            raise MalformedHeader(f"section {name!r} overlaps virtually")
        prev_virtual_end = align_up(va + vsize, section_align)
        if expected_raw is None:
            if roff < table_end:
                raise MalformedHeader("first section data overlaps headers")
        elif roff != expected_raw:
            raise MalformedHeader(
                f"section {name!r} raw data not contiguous at 0x{roff:x}"
            )
        expected_raw = roff + rsize
        if expected_raw > len(data):
            raise MalformedHeader(f"section {name!r} raw data truncated")
        sections.append(
            Section(
                name=name,
                virtual_address=va,
                virtual_size=vsize,
                raw_offset=roff,
                raw_size=rsize,
                characteristics=chars,
                data=data[roff : roff + rsize],
            )
        )

    if expected_raw != len(data):
        raise MalformedHeader("trailing bytes after last section")
    if size_of_image != prev_virtual_end:
        raise MalformedHeader(
            f"SizeOfImage 0x{size_of_image:x} != virtual extent 0x{prev_virtual_end:x}"
        )
    if not any(s.executable and s.contains_rva(entry_rva) for s in sections):
        raise MalformedHeader("entry point outside every executable section")

    checksum_present = checksum != 0
    if checksum_present and pe_checksum(data, layout.checksum_off) != checksum:
        raise MalformedHeader("stored PE checksum is incorrect")

    return PeImage(
        machine=machine,
        entry_point_rva=entry_rva,
        section_alignment=section_align,
        file_alignment=file_align,
        size_of_image=size_of_image,
        sections=tuple(sections),
        raw_headers=data[: sections[0].raw_offset],
        checksum_present=checksum_present,
    )


def serialize_pe(image: PeImage) -> bytes:
    """Inverse of parse_pe; modeled fields are patched into the header blob."""
    blob = bytearray(image.raw_headers)
    layout = _HeaderLayout(blob)
    struct.pack_into("<H", blob, layout.num_sections_off, len(image.sections))
    struct.pack_into("<I", blob, layout.entry_off, image.entry_point_rva)
    struct.pack_into("<I", blob, layout.size_of_image_off, image.size_of_image)
    struct.pack_into("<I", blob, layout.checksum_off, 0)
    for i, sec in enumerate(image.sections):
        off = layout.table + i * SECTION_ENTRY_SIZE
        blob[off : off + SECTION_ENTRY_SIZE] = sec.table_entry()
    out = bytes(blob) + b"".join(sec.data for sec in image.sections)
    if image.checksum_present:
        fixed = bytearray(out)
        struct.pack_into("<I", fixed, layout.checksum_off, pe_checksum(out, layout.checksum_off))
        out = bytes(fixed)
    return out


def find_section(image: PeImage, name: str | bytes) -> Section:
    padded = section_name_bytes(name)
    for sec in image.sections:
        if sec.name == padded:
            return sec
    raise SectionNotFound(f"no section named {name!r}")


def replace_section_data(image: PeImage, name: str | bytes, data: bytes) -> PeImage:
    """Swap a section's raw bytes in place; length must stay raw_size."""
    target = find_section(image, name)
    if len(data) != target.raw_size:
        raise ValueError("replacement data must match raw_size exactly")
    new_sections = tuple(
        replace(s, data=data) if s is target else s for s in image.sections
    )
    return replace(image, sections=new_sections)


def append_section(
    image: PeImage, name: str | bytes, data: bytes, characteristics: int
) -> PeImage:
    """Add a section after the last one in both file and virtual layout.

    Raw size is rounded up to the file alignment (data zero padded), the
    virtual address to the section alignment. Existing sections are left
    byte-identical; only the section count, SizeOfImage, and the new table
    entry change in the headers.
    """
    if not data:
        raise ValueError("cannot append an empty section")
    padded_name = section_name_bytes(name)
    if any(s.name == padded_name for s in image.sections):
        raise DuplicateSectionName(f"section {name!r} already present")

    layout = _HeaderLayout(image.raw_headers)
    table_end = layout.table + (len(image.sections) + 1) * SECTION_ENTRY_SIZE
    if table_end > len(image.raw_headers):
        raise NoHeaderSpace("no room in header region for another table entry")

    last = image.sections[-1]
    raw_size = align_up(len(data), image.file_alignment)
    new_section = Section(
        name=padded_name,
        virtual_address=align_up(
            last.virtual_address + last.virtual_size, image.section_alignment
        ),
        virtual_size=len(data),
        raw_offset=last.raw_offset + last.raw_size,
        raw_size=raw_size,
        characteristics=characteristics,
        data=data.ljust(raw_size, b"\x00"),
    )
    return replace(
        image,
        sections=image.sections + (new_section,),
        size_of_image=align_up(
            new_section.virtual_address + new_section.virtual_size,
            image.section_alignment,
        ),
    )


def set_entry_point(image: PeImage, rva: int) -> PeImage:
    if not any(s.executable and s.contains_rva(rva) for s in image.sections):
        raise RvaOutOfRange(f"rva 0x{rva:x} not inside an executable section")
    return replace(image, entry_point_rva=rva)
