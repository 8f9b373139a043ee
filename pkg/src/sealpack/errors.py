"""Exception hierarchy shared across the package.

Every error the public API raises derives from SealpackError so the CLI can
report a single error name on stderr and exit nonzero.
"""


class SealpackError(Exception):
    """Base class for all package errors."""


# --- PE image handling ---

class PeError(SealpackError):
    pass


class MalformedHeader(PeError):
    """Input is not an acceptable PE32+ image (bad magic, truncated or
    inconsistent section table, overlapping or non-canonical layout)."""


class SectionNotFound(PeError):
    pass


class DuplicateSectionName(PeError):
    pass


class RvaOutOfRange(PeError):
    """Requested entry point does not fall inside an executable section."""


class NoHeaderSpace(PeError):
    """Header region has no room left for another section table entry."""


# --- cipher ---

class CipherError(SealpackError):
    pass


class LengthNotBlockMultiple(CipherError):
    pass


# --- software TPM ---

class TpmError(SealpackError):
    pass


class IndexOutOfRange(TpmError):
    pass


class SessionTableFull(TpmError):
    pass


class UnknownSession(TpmError):
    pass


class IndexInUse(TpmError):
    pass


class HierarchyDisabled(TpmError):
    pass


class UnknownIndex(TpmError):
    pass


class DataTooLarge(TpmError):
    pass


class NotWritten(TpmError):
    pass


class PolicyMismatch(TpmError):
    """Session policy digest does not match the slot's auth policy; the PCR
    state differs from the one enrolled at sealing time."""


class TrialSessionNotAllowed(TpmError):
    pass


# --- packer ---

class PackError(SealpackError):
    pass


class NotAPe(PackError):
    pass


class NoTextSection(PackError):
    pass


class AlreadyPacked(PackError):
    pass


class NoSlackForPadding(PackError):
    """Text section raw slack cannot absorb zero padding up to a cipher
    block multiple."""


# --- boot simulator ---

class SimError(SealpackError):
    pass


class InvalidPlatformDescription(SimError):
    pass


class WrongPhase(SimError):
    pass


class ProtocolNotInstalled(SimError):
    """A packed module was dispatched before the unpack agent installed its
    protocol; an apriori ordering bug in the platform description."""


class DescriptorMismatch(SimError):
    pass


class UnknownHandler(SimError):
    pass


class UnknownScenario(SimError):
    pass


# --- capsule update ---

class CapsuleError(SealpackError):
    pass


class MalformedCapsule(CapsuleError):
    pass


class UnpackedModuleInCapsule(CapsuleError):
    pass


class PcrMismatchWithContents(CapsuleError):
    pass


class RecoveryFvMissingSealer(CapsuleError):
    pass
