"""Character-level codec shared by teacher and student."""

from __future__ import annotations

import string
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInputError

PAD, BOS, END = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<end>")
DEFAULT_ALPHABET = string.digits + "+-*=;:,>" + string.ascii_lowercase


@dataclass(frozen=True)
class TaskCodec:
    alphabet: str = DEFAULT_ALPHABET
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.alphabet)) != len(self.alphabet):
            raise InvalidInputError("alphabet has repeated symbols")
        index = {ch: i + len(SPECIALS) for i, ch in enumerate(self.alphabet)}
        object.__setattr__(self, "_index", index)

    @property
    def vocab_size(self) -> int:
        return len(SPECIALS) + len(self.alphabet)

    def encode(self, text: str) -> np.ndarray:
        try:
            return np.array([self._index[ch] for ch in text], dtype=np.int64)
        except KeyError as exc:
            raise InvalidInputError(f"symbol {exc.args[0]!r} not in codec alphabet") from None

    def encode_prompt(self, text: str) -> np.ndarray:
        return np.concatenate([[BOS], self.encode(text)]).astype(np.int64)

    def decode(self, ids) -> str:
        """Map ids back to text; specials render as nothing, decoding stops at END."""
        out = []
        for i in np.asarray(ids, dtype=np.int64).tolist():
            if i == END:
                break
            if i < len(SPECIALS):
                continue
            if i >= self.vocab_size:
                raise InvalidInputError(f"token id {i} outside vocabulary")
            out.append(self.alphabet[i - len(SPECIALS)])
        return "".join(out)
