"""Token vocabulary over semantic-ID codes, task tags and specials."""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .quantizer import TEXT_LEVEL_LETTERS, VISION_LEVEL_LETTERS

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"

TASKS = ("rec-t", "rec-v", "item-t2v", "item-v2t", "seq-t2v", "seq-v2t")
REC_TASKS = ("rec-t", "rec-v")


class Vocab:
    """Specials + 6 task tags + L*M text tokens + L*M vision tokens.

    Text level-l index-k tokens look like "<a_k>", "<b_k>", ...; vision uses
    the uppercase letters, so the two modalities never share a surface form.
    """

    def __init__(self, levels: int, codebook_size: int):
        if levels > len(TEXT_LEVEL_LETTERS):
            raise DataError(f"at most {len(TEXT_LEVEL_LETTERS)} levels supported")
        self.levels = levels
        self.codebook_size = codebook_size
        tokens = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN]
        tokens += [f"<{t}>" for t in TASKS]
        for letters in (TEXT_LEVEL_LETTERS, VISION_LEVEL_LETTERS):
            for level in range(levels):
                tokens += [f"<{letters[level]}_{k}>"
                           for k in range(codebook_size)]
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate token surface forms in vocabulary")
        self.id_to_token = tokens
        self.token_to_id = {tok: i for i, tok in enumerate(tokens)}
        self._sid_base = {"text": 3 + len(TASKS),
                          "vision": 3 + len(TASKS) + levels * codebook_size}

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    def task_id(self, task: str) -> int:
        return self.token_to_id[f"<{task}>"]

    def sid_token_ids(self, modality: str, codes) -> list[int]:
        base = self._sid_base[modality]
        m = self.codebook_size
        return [base + level * m + int(c) for level, c in enumerate(codes)]

    def sid_token_table(self, modality: str, codes: np.ndarray) -> np.ndarray:
        """(N, L) code table -> (N, L) vocabulary ids."""
        base = self._sid_base[modality]
        offsets = base + np.arange(codes.shape[1]) * self.codebook_size
        return codes + offsets[None, :]

    def encode(self, tokens: list[str]) -> list[int]:
        try:
            return [self.token_to_id[t] for t in tokens]
        except KeyError as exc:
            raise DataError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[int(i)] for i in ids]
