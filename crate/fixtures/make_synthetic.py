"""Writes the synthetic review corpora under fixtures/.

Sentences come from fixed templates; none of them contains a label word
(positive, negative, neutral), so a generator cannot copy the answer out of
the input. Run from this directory: python3 make_synthetic.py
"""
import json
import random

ASPECTS = ["food", "service", "staff", "price", "ambience", "menu", "wine", "dessert",
           "pizza", "waiter", "pasta", "decor", "music", "bread", "coffee"]

TEMPLATES = {
    ("positive", False): ["The {a} was wonderful.", "I loved the {a} here.", "Great {a} and friendly people.",
                          "The {a} is excellent.", "Really enjoyed the {a}."],
    ("negative", False): ["The {a} was terrible.", "I hated the {a}.", "Awful {a}, never again.",
                          "The {a} is bad.", "Really disappointed by the {a}."],
    ("neutral", False): ["The {a} is listed on the board.", "We asked about the {a}.",
                         "The {a} changes every season.", "They mentioned the {a} twice.",
                         "The {a} comes with the set lunch."],
    ("positive", True): ["We would come back just for the {a}.", "I already told my friends about the {a}.",
                         "Every plate of {a} went back empty.", "The {a} made our anniversary.",
                         "We ordered a second round of the {a}."],
    ("negative", True): ["The {a} arrived after we had finished our drinks.", "Half of the {a} went back to the kitchen.",
                         "We waited an hour for the {a}.", "The {a} cost twice what it should.",
                         "Nobody at the table finished the {a}."],
    ("neutral", True): ["The {a} was ordered by my brother.", "The {a} is on the second page.",
                        "I think the {a} is made in house.", "The {a} came on a square plate.",
                        "My colleague picked the {a}."],
}


def build(n, seed):
    rng = random.Random(seed)
    rows = []
    for i in range(n):
        polarity = ["positive", "negative", "neutral"][i % 3]
        implicit = rng.random() < 0.5
        aspect = rng.choice(ASPECTS)
        template = rng.choice(TEMPLATES[(polarity, implicit)])
        r = rng.random()
        split = "train" if r < 0.7 else ("validation" if r < 0.8 else "test")
        rows.append({"id": f"d{i:04d}", "sentence": template.format(a=aspect), "aspect_term": aspect,
                     "polarity": polarity, "implicit": implicit, "split": split})
    return rows


def write(path, rows):
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r, ensure_ascii=False, separators=(",", ":")) + "\n")


desk = build(300, 7)
write("desk/dataset.jsonl", desk)
small = build(20, 3)
for r, split in zip(small, ["train"] * 12 + ["validation"] * 3 + ["test"] * 5):
    r["split"] = split
write("small/dataset.jsonl", small)
