"""Closed token vocabulary shared by the corpus generator and language head.

The set is fixed at import time: specials, the numbers 0..99 as single
tokens, and every word the scene templates can emit.  Keeping it closed
makes exact-match QA well defined and keeps BLEU meaningful at this scale.
"""

from __future__ import annotations

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"

_WORDS = [
    # agent classes and statuses
    "car", "truck", "pedestrian", "barrier",
    "moving", "not", "still",
    # directions (octants combine two of these)
    "front", "back", "left", "right",
    # caption template
    "about", "meters", "is",
    # prediction template
    "will", "keep", "stay",
    # prompts
    "describe", "predict", "explain", "agent", "plan", "the",
    # planning explanations
    "ego", "keeps", "going", "straight", "because", "road", "ahead",
    "clear", "stops", "traffic", "light", "red", "slows", "down", "a",
    "crossing",
    # question/answer words
    "how", "many", "agents", "are", "what", "status", "of", "closest",
    "other", "have", "same", "as", "class", "farthest", "none", "yes",
    "no", "in", "scene",
]

TOKENS: list[str] = [PAD, BOS, EOS] + [str(n) for n in range(100)] + _WORDS

_INDEX = {tok: i for i, tok in enumerate(TOKENS)}

PAD_ID = _INDEX[PAD]
BOS_ID = _INDEX[BOS]
EOS_ID = _INDEX[EOS]


def vocab_size() -> int:
    return len(TOKENS)


def encode(text: str) -> list[int]:
    """Whitespace-split ``text`` into token ids; unknown words are an error."""
    ids = []
    for word in text.split():
        idx = _INDEX.get(word)
        if idx is None:
            raise KeyError(f"word not in vocabulary: {word!r}")
        ids.append(idx)
    return ids


def decode(ids) -> str:
    """Inverse of encode; specials are rendered literally."""
    return " ".join(TOKENS[int(i)] for i in ids)
