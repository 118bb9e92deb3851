"""EVM bytecode decoding."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Union

from dvdet.errors import InputFormatError
from dvdet.opcodes import BY_NAME, OPCODES, immediate_size

log = logging.getLogger(__name__)

Code = Union[str, bytes, bytearray]

_HEXDIGITS = frozenset("0123456789abcdefABCDEF")


class DisasmFormatError(InputFormatError):
    """Bytecode text is not valid hex."""

    def __init__(self, message: str, position: int | None = None) -> None:
        super().__init__(message)
        self.position = position


@dataclass(frozen=True)
class Instruction:
    """A single decoded EVM instruction."""

    offset: int
    mnemonic: str
    opcode: int
    immediate: bytes | None = None
    is_valid: bool = True
    # the immediate ran past end-of-code and was zero-padded
    truncated: bool = False

    @property
    def size(self) -> int:
        return 1 + (len(self.immediate) if self.immediate is not None else 0)

    @property
    def value(self) -> int | None:
        """Immediate as a big-endian integer (PUSH only)."""
        if self.immediate is None:
            return None
        return int.from_bytes(self.immediate, "big")

    def to_json(self) -> dict:
        return {
            "offset": self.offset,
            "mnemonic": self.mnemonic,
            "opcode": self.opcode,
            "immediate": self.immediate.hex() if self.immediate is not None else None,
        }

    def __str__(self) -> str:
        text = f"{self.offset:04x}  {self.mnemonic}"
        if self.immediate is not None:
            text += " 0x" + self.immediate.hex()
        return text


def parse_hex(text: str) -> bytes:
    """Decode ASCII hex with an optional ``0x`` prefix; whitespace is ignored.

    Raises DisasmFormatError naming the position (in ``text``) of the first
    offending character.
    """
    start = 0
    stripped = text.lstrip()
    lead = len(text) - len(stripped)
    if stripped[:2] in ("0x", "0X"):
        start = lead + 2
    digits: list[str] = []
    for pos in range(start, len(text)):
        ch = text[pos]
        if ch.isspace():
            continue
        if ch not in _HEXDIGITS:
            raise DisasmFormatError(f"non-hex character {ch!r} at position {pos}", pos)
        digits.append(ch)
    if len(digits) % 2:
        raise DisasmFormatError(
            f"odd number of hex digits ({len(digits)}); dangling digit at position {len(text.rstrip()) - 1}",
            len(text.rstrip()) - 1,
        )
    return bytes.fromhex("".join(digits))


def as_bytes(code: Code) -> bytes:
    if isinstance(code, str):
        return parse_hex(code)
    return bytes(code)


def load_code(path: str | Path) -> bytes:
    """Read a ``.bin`` (raw) or any other extension (ASCII hex) bytecode file."""
    path = Path(path)
    data = path.read_bytes()
    if path.suffix == ".bin":
        return data
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise DisasmFormatError(f"{path}: not ASCII hex", exc.start) from exc
    return parse_hex(text)


def disassemble(code: Code, warnings: list[str] | None = None) -> list[Instruction]:
    """Decode ``code`` into a linear instruction stream.

    A PUSH whose immediate runs past the end of the code gets a zero-padded
    immediate and ``truncated=True``; a message is appended to ``warnings``
    when given. Undefined bytes decode as ``INVALID`` with ``is_valid=False``.
    """
    raw = as_bytes(code)
    out: list[Instruction] = []
    pc = 0
    n = len(raw)
    while pc < n:
        op = raw[pc]
        entry = OPCODES.get(op)
        if entry is None:
            out.append(Instruction(pc, "INVALID", op, None, is_valid=False))
            pc += 1
            continue
        name, width = entry
        if width == 0:
            out.append(Instruction(pc, name, op))
            pc += 1
            continue
        imm = raw[pc + 1 : pc + 1 + width]
        truncated = len(imm) < width
        if truncated:
            msg = f"{name} at offset {pc} truncated: {len(imm)} of {width} immediate bytes present"
            log.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            imm = imm + bytes(width - len(imm))
        out.append(Instruction(pc, name, op, bytes(imm), truncated=truncated))
        pc += 1 + width
    return out


def encode(instructions: Iterable[Instruction]) -> bytes:
    """Re-encode an instruction stream to bytes.

    Truncated immediates are written with their zero padding, so streams
    containing one do not round-trip.
    """
    buf = bytearray()
    for ins in instructions:
        buf.append(ins.opcode)
        if ins.immediate is not None:
            buf += ins.immediate
    return bytes(buf)


def assemble(program: Iterable[str | tuple[str, int | bytes]]) -> bytes:
    """Assemble mnemonics (``"ADD"`` or ``("PUSH1", 3)``) into bytecode."""
    buf = bytearray()
    for item in program:
        if isinstance(item, str):
            name, arg = item, None
        else:
            name, arg = item
        op = BY_NAME[name]
        buf.append(op)
        width = immediate_size(op)
        if width:
            if arg is None:
                raise ValueError(f"{name} needs an immediate")
            imm = arg if isinstance(arg, (bytes, bytearray)) else int(arg).to_bytes(width, "big")
            if len(imm) != width:
                raise ValueError(f"{name} immediate must be {width} bytes")
            buf += imm
        elif arg is not None:
            raise ValueError(f"{name} takes no immediate")
    return bytes(buf)


def _cbor_item_end(buf: bytes, pos: int) -> int:
    """Return the end offset of the CBOR data item starting at ``pos``."""
    if pos >= len(buf):
        raise ValueError("truncated CBOR")
    head = buf[pos]
    major, info = head >> 5, head & 0x1F
    pos += 1
    if info < 24:
        arg = info
    elif info in (24, 25, 26, 27):
        width = 1 << (info - 24)
        if pos + width > len(buf):
            raise ValueError("truncated CBOR")
        arg = int.from_bytes(buf[pos : pos + width], "big")
        pos += width
    else:
        # indefinite lengths and reserved values never appear in solc metadata
        raise ValueError("unsupported CBOR head")
    if major in (0, 1, 7):
        return pos
    if major in (2, 3):
        if pos + arg > len(buf):
            raise ValueError("truncated CBOR")
        return pos + arg
    if major == 4:
        for _ in range(arg):
            pos = _cbor_item_end(buf, pos)
        return pos
    if major == 5:
        for _ in range(2 * arg):
            pos = _cbor_item_end(buf, pos)
        return pos
    return _cbor_item_end(buf, pos)  # major 6: tag wraps one item


def strip_metadata(code: Code) -> bytes:
    """Remove a trailing Solidity CBOR metadata blob, if one is present.

    The trailer is a CBOR map followed by its length as a 2-byte big-endian
    integer. Anything that does not parse exactly is left in place.
    """
    raw = as_bytes(code)
    if len(raw) < 2:
        return raw
    length = int.from_bytes(raw[-2:], "big")
    start = len(raw) - 2 - length
    if length == 0 or start < 0:
        return raw
    if raw[start] >> 5 != 5:
        return raw
    try:
        end = _cbor_item_end(raw, start)
    except (ValueError, RecursionError):
        return raw
    if end != len(raw) - 2:
        return raw
    return raw[:start]
