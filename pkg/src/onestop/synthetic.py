"""Template corpus with planted answers, used for overfit and joint-vs-pipeline runs.

Each document states a few facts about different people. One fact is
flagged with ``notably ,``; the question asks about that fact and the
answer is its object. The flag makes the asked fact recoverable from the
document alone, and the question's wording decides which span answers it.
"""

from __future__ import annotations

import numpy as np

NAMES = [
    "alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy",
    "mallory", "niaj", "olivia", "peggy", "rupert", "sybil", "trent", "victor", "walter", "yolanda",
]
CITIES = [
    "paris", "london", "berlin", "madrid", "rome", "vienna", "oslo", "lisbon",
    "new york", "san francisco", "buenos aires", "hong kong", "cape town", "tel aviv",
]
COMPANIES = [
    "acme", "globex", "initech", "umbrella", "hooli", "vandelay industries",
    "stark industries", "wayne enterprises", "pied piper", "cyberdyne",
]
OBJECTS = [
    "a red car", "a small boat", "an old piano", "a black cat", "a green bicycle",
    "a wooden house", "a silver watch", "a large dog", "a blue kite", "a rare stamp",
]
YEARS = [str(y) for y in range(1950, 2000, 3)]

# relation: (statement template, question template, answer pool)
RELATIONS = {
    "live": ("{n} lives in {a} .", "where does {n} live ?", CITIES),
    "work": ("{n} works for {a} .", "who does {n} work for ?", COMPANIES),
    "own": ("{n} owns {a} .", "what does {n} own ?", OBJECTS),
    "born": ("{n} was born in {a} .", "when was {n} born ?", YEARS),
}


def make_record(rng: np.random.Generator, n_facts: int = 3) -> dict:
    """One corpus record in the JSON-lines schema (character offsets into ``document``)."""
    names = rng.choice(len(NAMES), size=n_facts, replace=False)
    rels = list(RELATIONS)
    asked = int(rng.integers(n_facts))
    parts, answer_char = [], None
    offset = 0
    question = None
    for k, ni in enumerate(names):
        rel = rels[int(rng.integers(len(rels)))]
        stmt, qtpl, pool = RELATIONS[rel]
        ans = pool[int(rng.integers(len(pool)))]
        name = NAMES[ni]
        prefix = "notably , " if k == asked else ""
        sentence = prefix + stmt.format(n=name, a=ans)
        if k == asked:
            local = sentence.index(" " + ans + " ") + 1
            answer_char = (offset + local, offset + local + len(ans))
            question = qtpl.format(n=name)
        parts.append(sentence)
        offset += len(sentence) + 1
    document = " ".join(parts)
    return {
        "document": document,
        "question": question,
        "answer_start_char": answer_char[0],
        "answer_end_char": answer_char[1],
    }


def make_corpus(n: int, seed: int = 0, n_facts: int = 3) -> list[dict]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        rec = make_record(rng, n_facts)
        rec["id"] = f"syn{seed}-{i}"
        out.append(rec)
    return out
