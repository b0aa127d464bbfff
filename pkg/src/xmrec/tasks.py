"""Six-stream seq2seq training-data builder over semantic-ID tokens."""

from __future__ import annotations

import json
from dataclasses import dataclass

from .dataio import InteractionLog
from .errors import DataError
from .quantizer import SemanticIds
from .vocab import Vocab


@dataclass
class TrainingExample:
    task: str
    x: list[int]      # task tag + input token ids
    y: list[int]      # one item's L-token semantic ID + EOS


def build_tasks(log: InteractionLog, sids: SemanticIds, vocab: Vocab,
                window: int = 20) -> list[TrainingExample]:
    """Expand the train-split sequences into the six task streams.

    Per train-prefix: rec-t / rec-v (same-modality next-item), seq-t2v /
    seq-v2t (cross-modality next-item). Per item: item-t2v / item-v2t.
    Histories keep the `window` most recent items.
    """
    sid_tok = {
        "text": {item: vocab.sid_token_ids("text", sids.text[i])
                 for i, item in enumerate(sids.items)},
        "vision": {item: vocab.sid_token_ids("vision", sids.vision[i])
                   for i, item in enumerate(sids.items)},
    }

    def tokens_of(item: str, modality: str) -> list[int]:
        try:
            return sid_tok[modality][item]
        except KeyError:
            raise DataError(f"item '{item}' has no semantic ID") from None

    examples: list[TrainingExample] = []
    rec_specs = (("rec-t", "text", "text"), ("rec-v", "vision", "vision"),
                 ("seq-t2v", "text", "vision"), ("seq-v2t", "vision", "text"))
    for user in log.users:
        seq = log.train[user]
        for p in range(1, len(seq)):
            history = seq[max(0, p - window):p]
            target = seq[p]
            for task, hist_mod, target_mod in rec_specs:
                x = [vocab.task_id(task)]
                for item in history:
                    x.extend(tokens_of(item, hist_mod))
                y = tokens_of(target, target_mod) + [vocab.eos_id]
                examples.append(TrainingExample(task=task, x=x, y=y))
    for item in sids.items:
        examples.append(TrainingExample(
            task="item-t2v",
            x=[vocab.task_id("item-t2v")] + tokens_of(item, "text"),
            y=tokens_of(item, "vision") + [vocab.eos_id]))
        examples.append(TrainingExample(
            task="item-v2t",
            x=[vocab.task_id("item-v2t")] + tokens_of(item, "vision"),
            y=tokens_of(item, "text") + [vocab.eos_id]))
    return examples


def task_counts(examples: list[TrainingExample]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for ex in examples:
        counts[ex.task] = counts.get(ex.task, 0) + 1
    return counts


def write_tasks(path, examples: list[TrainingExample], vocab: Vocab):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({"task": ex.task,
                                 "x": vocab.decode(ex.x),
                                 "y": vocab.decode(ex.y)}) + "\n")


def history_tokens(items: list[str], modality: str, sids: SemanticIds,
                   vocab: Vocab, task: str, window: int) -> list[int]:
    """Inference-side input builder: task tag + windowed history IDs."""
    x = [vocab.task_id(task)]
    codes = sids.codes(modality)
    for item in items[-window:] if window else items:
        x.extend(vocab.sid_token_ids(modality, codes[sids.index[item]]))
    return x
