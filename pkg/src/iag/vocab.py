"""Mixed vocabulary: structural specials, template + grammar words, and one
token per integer coordinate 0..1000."""
from __future__ import annotations

import hashlib
import re
from typing import Iterable, Sequence

from .scenegen import grammar_words

PAD, BOS, EOS, SEP = "<pad>", "<bos>", "<eos>", "<sep>"
OBJ_OPEN, OBJ_CLOSE, BOX_OPEN, BOX_CLOSE, COMMA = "<", ">", "[", "]", ","
SPECIALS = (PAD, BOS, EOS, SEP, OBJ_OPEN, OBJ_CLOSE, BOX_OPEN, BOX_CLOSE, COMMA)
TEMPLATE_WORDS = ("Q", ":", ".", "<object>")
N_COORDS = 1001

_TOKEN_RE = re.compile(r"<object>|\d+|[A-Za-z]+|[<>\[\],.:]|\S")
# no space is emitted before these tokens / after these tokens
_GLUE_LEFT = {":", ".", COMMA, OBJ_CLOSE, BOX_OPEN, BOX_CLOSE}
_GLUE_RIGHT = {OBJ_OPEN, BOX_OPEN, COMMA}
_SILENT = {PAD, BOS, EOS, SEP}


class TokenizeError(ValueError):
    pass


class Vocab:
    def __init__(self, words: Iterable[str] | None = None):
        words = list(grammar_words() if words is None else words)
        self.itos: list[str] = [*SPECIALS, *TEMPLATE_WORDS, *words]
        self.coord_offset = len(self.itos)
        self.itos += [f"c{k}" for k in range(N_COORDS)]
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.itos)

    def __getitem__(self, token: str) -> int:
        return self.stoi[token]

    @property
    def pad(self) -> int:
        return self.stoi[PAD]

    @property
    def eos(self) -> int:
        return self.stoi[EOS]

    def digest(self) -> str:
        return hashlib.sha256("\x00".join(self.itos).encode()).hexdigest()[:16]

    def coord(self, k: int) -> int:
        if not 0 <= k < N_COORDS:
            raise TokenizeError(f"coordinate {k} outside 0..1000")
        return self.coord_offset + k

    def coord_value(self, token_id: int) -> int | None:
        k = token_id - self.coord_offset
        return k if 0 <= k < N_COORDS else None

    def is_coord(self, token_id: int) -> bool:
        return self.coord_value(token_id) is not None

    def tokenize(self, text: str) -> list[int]:
        ids: list[int] = []
        in_box = False
        for piece in _TOKEN_RE.findall(text):
            if piece.isdigit():
                if not in_box:
                    raise TokenizeError(f"number {piece!r} outside a box span")
                ids.append(self.coord(int(piece)))
                continue
            if piece == BOX_OPEN:
                in_box = True
            elif piece == BOX_CLOSE:
                in_box = False
            if piece not in self.stoi or piece in _SILENT:
                raise TokenizeError(f"out-of-grammar token {piece!r}")
            ids.append(self.stoi[piece])
        return ids

    def detokenize(self, ids: Sequence[int]) -> str:
        out: list[str] = []
        prev = None
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.itos):
                raise TokenizeError(f"token id {i} out of range")
            tok = self.itos[i]
            if tok in _SILENT:
                continue
            text = str(self.coord_value(i)) if self.is_coord(i) else tok
            if prev is not None and tok not in _GLUE_LEFT and prev not in _GLUE_RIGHT:
                out.append(" ")
            out.append(text)
            prev = tok
        return "".join(out)


def parse_bbox(vocab: Vocab, ids: Sequence[int]) -> tuple[int, int, int, int] | None:
    """First ``[c,c,c,c]`` span as integers, or None when malformed.

    Malformed covers a missing close bracket, anything other than exactly four
    comma-separated coordinate tokens, and a reversed box.
    """
    ids = [int(i) for i in ids]
    open_id, close_id, comma_id = vocab[BOX_OPEN], vocab[BOX_CLOSE], vocab[COMMA]
    try:
        start = ids.index(open_id)
    except ValueError:
        return None
    try:
        end = ids.index(close_id, start + 1)
    except ValueError:
        return None
    span = ids[start + 1:end]
    if len(span) != 7 or any(span[k] != comma_id for k in (1, 3, 5)):
        return None
    coords = [vocab.coord_value(span[k]) for k in (0, 2, 4, 6)]
    if any(c is None for c in coords):
        return None
    x0, y0, x1, y1 = coords
    if x0 > x1 or y0 > y1:
        return None
    return x0, y0, x1, y1
