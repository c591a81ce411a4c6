"""Word-level tokenizer over the report/QA corpus with a byte fallback."""
import json
import re
from collections import Counter
from pathlib import Path
from typing import Iterable

PAD, BOS, EOS, IMG_OPEN, IMG_CLOSE = "<pad>", "<s>", "</s>", "<Img>", "</Img>"
SPECIAL_TOKENS = (PAD, BOS, EOS, IMG_OPEN, IMG_CLOSE)
BYTE_TOKENS = tuple(f"<0x{b:02X}>" for b in range(256))

_WORD = re.compile(r"\w+|[^\w\s]")
_NO_SPACE_BEFORE = set(".,;:!?)%")
_NO_SPACE_AFTER = set("(")


class Tokenizer:
    def __init__(self, words: Iterable[str] = ()):
        self.vocab: list[str] = list(SPECIAL_TOKENS) + list(BYTE_TOKENS)
        seen = set(self.vocab)
        for word in words:
            if word not in seen:
                self.vocab.append(word)
                seen.add(word)
        self.index = {token: i for i, token in enumerate(self.vocab)}
        self.pad_id, self.bos_id, self.eos_id, self.img_open_id, self.img_close_id = (
            self.index[t] for t in SPECIAL_TOKENS
        )
        self._byte_offset = len(SPECIAL_TOKENS)

    def __len__(self) -> int:
        return len(self.vocab)

    @classmethod
    def from_corpus(cls, texts: Iterable[str]) -> "Tokenizer":
        counts = Counter(word for text in texts for word in _WORD.findall(text))
        # most frequent first, alphabetical within a count
        return cls(sorted(counts, key=lambda w: (-counts[w], w)))

    def _is_byte(self, token_id: int) -> bool:
        return self._byte_offset <= token_id < self._byte_offset + 256

    def encode(self, text: str, add_bos: bool = False, add_eos: bool = False) -> list[int]:
        ids = [self.bos_id] if add_bos else []
        previous_was_bytes = False
        for word in _WORD.findall(text):
            if word in self.index:
                ids.append(self.index[word])
                previous_was_bytes = False
                continue
            raw = word.encode("utf-8")
            if previous_was_bytes:
                raw = b" " + raw
            ids.extend(self._byte_offset + b for b in raw)
            previous_was_bytes = True
        if add_eos:
            ids.append(self.eos_id)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        pieces: list[str] = []
        buffer = bytearray()
        for token_id in ids:
            token_id = int(token_id)
            if self._is_byte(token_id):
                buffer.append(token_id - self._byte_offset)
                continue
            if buffer:
                pieces.append(buffer.decode("utf-8", errors="replace"))
                buffer.clear()
            if token_id < len(SPECIAL_TOKENS) or token_id >= len(self.vocab):
                continue
            pieces.append(self.vocab[token_id])
        if buffer:
            pieces.append(buffer.decode("utf-8", errors="replace"))

        text = ""
        for piece in pieces:
            if text and piece[0] not in _NO_SPACE_BEFORE and text[-1] not in _NO_SPACE_AFTER:
                text += " "
            text += piece
        return text

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.vocab, ensure_ascii=False, indent=0))

    @classmethod
    def load(cls, path: Path) -> "Tokenizer":
        vocab = json.loads(Path(path).read_text())
        fixed = len(SPECIAL_TOKENS) + len(BYTE_TOKENS)
        if tuple(vocab[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError(f"{path}: vocabulary does not start with the special tokens")
        return cls(vocab[fixed:])
