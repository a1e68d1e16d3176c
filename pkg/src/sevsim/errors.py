"""Exception hierarchy shared by every layer of the simulator."""


class SevSimError(Exception):
    """Base class for simulator errors."""


# -- key store ---------------------------------------------------------------

class KeyStoreError(SevSimError):
    code = "KEYSTORE_ERROR"


class UnknownAsid(KeyStoreError):
    code = "UNKNOWN_ASID"


class AsidAlreadyActive(KeyStoreError):
    code = "ASID_ALREADY_ACTIVE"


class WbinvdRequired(KeyStoreError):
    code = "WBINVD_REQUIRED"


class DfflushRequired(KeyStoreError):
    code = "DFFLUSH_REQUIRED"


# -- addressing / paging -------------------------------------------------------

class NonCanonicalAddress(SevSimError):
    pass


class UnalignedOffset(SevSimError):
    pass


class NotLeakable(SevSimError):
    pass


class GuestPageFault(SevSimError):
    """Raised inside a guest walk; never escapes vmrun."""

    def __init__(self, gva: int, reason: str = ""):
        super().__init__(f"#PF at {gva:#x} {reason}".strip())
        self.gva = gva
        self.reason = reason


class NestedPageFault(SevSimError):
    """Missing nPT mapping (or RMP mismatch) for a guest-physical address."""

    def __init__(self, gpa: int, rmp: bool = False):
        kind = "RMP" if rmp else "NPF"
        super().__init__(f"{kind} at gPA {gpa:#x}")
        self.gpa = gpa
        self.rmp = rmp


class GeneralProtection(SevSimError):
    """Malformed or non-present IDT gate, or other #GP during delivery."""


class UndefinedInstruction(SevSimError):
    def __init__(self, rip: int, opcode: bytes = b""):
        super().__init__(f"#UD at {rip:#x}: {opcode.hex()}")
        self.rip = rip
        self.opcode = opcode


# -- platform / hypervisor ---------------------------------------------------

class IllegalAsidRange(SevSimError):
    pass


class PoolExhausted(SevSimError):
    pass


class VmCrashed(SevSimError):
    pass


class VmRelaunchNeeded(SevSimError):
    pass


class IntegrityError(SevSimError):
    pass


# -- attacks / scanner / cli -------------------------------------------------

class SevEsUnsupported(SevSimError):
    pass


class GadgetNotFound(SevSimError):
    pass


class InputTooShort(SevSimError):
    pass


class ConfigParseError(SevSimError):
    pass
