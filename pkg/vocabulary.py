"""
Closed vocabularies of the explanation template and the word-level
token vocabulary used by the explainer's decoder.
"""

from typing import Dict, List, Sequence

from exceptions import VocabularyError
from geometry import POSITIONS
from models import OBJECT_KINDS

OBJECT_NAMES = OBJECT_KINDS
ACTION_STATUSES = ("crossing", "cutting in", "stopped", "approaching", "moving away")
SLOT_NAMES = ("object", "action", "position")
SLOT_VOCABULARIES = {
    "object": OBJECT_NAMES,
    "action": ACTION_STATUSES,
    "position": POSITIONS,
}

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIAL_TOKENS = (PAD, BOS, EOS)


def template_words() -> List[str]:
    """Every word of the slot vocabularies, in first-seen order"""
    words: List[str] = []
    for slot in SLOT_NAMES:
        for phrase in SLOT_VOCABULARIES[slot]:
            for word in phrase.split():
                if word not in words:
                    words.append(word)
    return words


class Vocabulary:
    """Word <-> id mapping over the template words plus PAD/BOS/EOS"""

    def __init__(self, words: Sequence[str] = None):
        self.itos: List[str] = list(SPECIAL_TOKENS) + list(words if words is not None else template_words())
        self.stoi: Dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        self.pad_id = self.stoi[PAD]
        self.bos_id = self.stoi[BOS]
        self.eos_id = self.stoi[EOS]

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, text: str, max_length: int = None) -> List[int]:
        """Token ids of a text followed by EOS"""
        ids = []
        for word in text.lower().split():
            if word not in self.stoi or word in SPECIAL_TOKENS:
                raise VocabularyError(f"Word '{word}' is not in the vocabulary")
            ids.append(self.stoi[word])
        ids.append(self.eos_id)
        if max_length is not None and len(ids) > max_length:
            raise VocabularyError(f"'{text}' needs {len(ids)} tokens, more than {max_length}")
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        """Words up to the first EOS, specials dropped"""
        words = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if 0 <= i < len(self.itos) and self.itos[i] not in SPECIAL_TOKENS:
                words.append(self.itos[i])
        return " ".join(words)

    def to_dict(self) -> Dict[str, List[str]]:
        return {"tokens": list(self.itos)}
