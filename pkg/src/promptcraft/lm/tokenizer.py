"""Byte-level tokenizer: ids 0-255 are raw bytes, 256-259 are specials."""

from __future__ import annotations

PAD = 256
BOS = 257
EOS = 258
SEP = 259
VOCAB_SIZE = 260

SPECIAL_NAMES = {PAD: "<pad>", BOS: "<bos>", EOS: "<eos>", SEP: "<sep>"}


def _as_bytes(text: str | bytes) -> bytes:
    return text.encode("utf-8") if isinstance(text, str) else bytes(text)


def encode(text: str | bytes) -> list[int]:
    """One id per byte; never emits specials."""
    return list(_as_bytes(text))


def decode_bytes(ids) -> bytes:
    """Byte string for ``ids``, dropping special tokens."""
    return bytes(int(i) for i in ids if int(i) < 256)


def decode(ids) -> str:
    return decode_bytes(ids).decode("utf-8", errors="replace")


class ByteTokenizer:
    """Object wrapper for code that wants a tokenizer instance."""

    pad_id = PAD
    bos_id = BOS
    eos_id = EOS
    sep_id = SEP
    vocab_size = VOCAB_SIZE

    def encode(self, text: str | bytes) -> list[int]:
        return encode(text)

    def decode(self, ids) -> str:
        return decode(ids)

    def decode_bytes(self, ids) -> bytes:
        return decode_bytes(ids)
