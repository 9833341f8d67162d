"""Regenerates the bundled fixture corpora. Deterministic; run from any directory."""

import json
import random
from pathlib import Path

HERE = Path(__file__).resolve().parent

LEXICON = {
    "humor": ["acting", "silly", "totally", "bonkers", "dancing", "clumsily"],
    "negative": ["sadly", "alone", "very", "tired", "quite", "bored"],
    "positive": ["feeling", "great", "having", "fun", "so", "joyful"],
    "romantic": ["dreaming", "sweetly", "madly", "smitten", "together", "forever"],
}
PHRASES = {
    "humor": [("acting", "silly"), ("totally", "bonkers"), ("dancing", "clumsily")],
    "negative": [("sadly", "alone"), ("very", "tired"), ("quite", "bored")],
    "positive": [("feeling", "great"), ("having", "fun"), ("so", "joyful")],
    "romantic": [("dreaming", "sweetly"), ("madly", "smitten"), ("together", "forever")],
}
RARE = ["chasing", "seagulls", "beneath", "cloudy", "skies", "while", "tourists", "photograph", "ancient", "lighthouses"]
SUBJECTS = ["dog", "cat", "man", "woman", "boy", "girl", "horse", "couple"]
VERBS = ["runs", "sits", "walks", "rests", "plays"]
PLACES = [("on", "beach"), ("on", "grass"), ("by", "lake"), ("near", "road"), ("at", "park"), ("by", "river")]


def scene(rng):
    subj, verb, (prep, place) = rng.choice(SUBJECTS), rng.choice(VERBS), rng.choice(PLACES)
    return f"a {subj} {verb} {prep} the {place}", f"tags:{subj},{verb},{place}"


def write_jsonl(name, rows):
    with open(HERE / name, "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def main():
    rng = random.Random(7)
    styles = sorted(LEXICON)
    stylized = []
    for i in range(50):
        style = styles[i % len(styles)]
        caption, uri = scene(rng)
        stylized.append({
            "image_id": f"s{i:03d}",
            "image_uri": uri,
            "caption": f"{caption} {' '.join(rng.choice(PHRASES[style]))}",
            "style": style,
        })
    factual = []
    for i in range(500):
        caption, uri = scene(rng)
        if i % 25 == 3:
            # Unfamiliar words: fluency suffers.
            caption += " " + " ".join(rng.sample(RARE, 7))
        elif i % 25 == 11:
            # Already strongly worded: other styles lose the classifier.
            caption += " " + " ".join(rng.choice(PHRASES["negative"]))
        factual.append({"image_id": f"f{i:04d}", "image_uri": uri, "caption": caption})
    write_jsonl("stylized.jsonl", stylized)
    write_jsonl("factual.jsonl", factual)
    with open(HERE / "lexicon.json", "w") as f:
        json.dump(LEXICON, f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()
