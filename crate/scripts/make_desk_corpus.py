#!/usr/bin/env python3
"""Builds the desk-scale caption corpus and matching word vectors.

Captions come from a seeded stochastic grammar over everyday scenes.
Vectors are a rank-32 SVD of the positive PMI matrix of window-2
co-occurrence counts, written in the usual text format.

    python3 scripts/make_desk_corpus.py --out data --n 10000 --seed 3
"""

import argparse
import os
import random
from collections import Counter

import numpy as np

PEOPLE = ["man", "woman", "boy", "girl", "person", "child", "player", "skier",
          "surfer", "chef", "couple", "group of people", "young man", "old woman",
          "little girl", "baseball player", "tennis player", "skateboarder"]
ANIMALS = ["dog", "cat", "horse", "bird", "cow", "sheep", "elephant", "giraffe",
           "zebra", "bear", "puppy", "kitten"]
VEHICLES = ["car", "bus", "train", "truck", "motorcycle", "bicycle", "boat", "airplane"]
OBJECTS = ["pizza", "sandwich", "cake", "laptop", "phone", "umbrella", "kite",
           "frisbee", "surfboard", "skateboard", "tennis racket", "teddy bear",
           "bowl of fruit", "plate of food", "cup of coffee", "book", "clock", "vase of flowers"]
PLACES = ["street", "field", "beach", "kitchen", "park", "table", "road", "snow",
          "water", "grass", "room", "city", "sidewalk", "track", "bed", "couch",
          "counter", "window", "building", "hill"]
ADJ = ["red", "white", "black", "large", "small", "blue", "green", "yellow",
       "brown", "tall", "old", "young", "wooden", "busy", "empty", "colorful"]
PERSON_VERBS = ["riding", "holding", "eating", "carrying", "throwing", "looking at",
                "playing with", "sitting on", "standing next to", "walking with"]
ANIMAL_VERBS = ["standing in", "sitting on", "laying on", "walking across",
                "grazing in", "running through", "looking out of"]
VEHICLE_VERBS = ["parked on", "driving down", "traveling on", "stopped at", "going down"]
PREPS = ["on", "in", "near", "next to", "in front of", "on top of", "at"]
QUANT = ["a", "a", "a", "the", "two", "three", "some", "several"]


def noun_phrase(rng, nouns, adj_p=0.35):
    det = rng.choice(QUANT)
    noun = rng.choice(nouns)
    if det in ("two", "three", "several", "some"):
        noun = plural(noun)
    adj = rng.choice(ADJ) + " " if rng.random() < adj_p else ""
    if det == "a" and (adj or noun)[0] in "aeiou":
        det = "an"
    return f"{det} {adj}{noun}"


def plural(noun):
    head, _, rest = noun.partition(" of ")
    words = head.split()
    last = words[-1]
    irregular = {"man": "men", "woman": "women", "child": "children", "person": "people",
                 "sheep": "sheep", "couple": "couples", "group": "groups"}
    if last in irregular:
        words[-1] = irregular[last]
    elif last.endswith(("s", "sh", "ch")):
        words[-1] = last + "es"
    elif last.endswith("y") and last[-2] not in "aeiou":
        words[-1] = last[:-1] + "ies"
    else:
        words[-1] = last + "s"
    out = " ".join(words)
    return f"{out} of {rest}" if rest else out


def place(rng):
    return f"{rng.choice(PREPS)} {noun_phrase(rng, PLACES, 0.25).replace('two ', 'the ').replace('three ', 'the ')}"


def caption(rng):
    kind = rng.random()
    if kind < 0.4:
        s = f"{noun_phrase(rng, PEOPLE)} {rng.choice(PERSON_VERBS)} {noun_phrase(rng, OBJECTS + ANIMALS)}"
    elif kind < 0.65:
        s = f"{noun_phrase(rng, ANIMALS)} {rng.choice(ANIMAL_VERBS)} {noun_phrase(rng, PLACES, 0.2)}"
    elif kind < 0.85:
        s = f"{noun_phrase(rng, VEHICLES)} {rng.choice(VEHICLE_VERBS)} {noun_phrase(rng, PLACES, 0.2)}"
    else:
        s = f"{noun_phrase(rng, OBJECTS)} sitting {place(rng)}"
    if rng.random() < 0.45:
        s += " " + place(rng)
    if rng.random() < 0.5:
        s += " ."
    return s


def ppmi_svd(captions, dim, window=2):
    tokens = [c.split() for c in captions]
    counts = Counter(w for t in tokens for w in t)
    vocab = sorted(counts, key=lambda w: (-counts[w], w))
    index = {w: i for i, w in enumerate(vocab)}
    co = np.zeros((len(vocab), len(vocab)))
    for t in tokens:
        ids = [index[w] for w in t]
        for i, a in enumerate(ids):
            for b in ids[max(0, i - window):i] + ids[i + 1:i + 1 + window]:
                co[a, b] += 1.0
    total = co.sum()
    row = co.sum(axis=1, keepdims=True)
    col = co.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.log(co * total / (row @ col))
    pmi[~np.isfinite(pmi)] = 0.0
    ppmi = np.maximum(pmi, 0.0)
    u, s, _ = np.linalg.svd(ppmi, full_matrices=False)
    k = min(dim, len(s))
    vecs = np.zeros((len(vocab), dim))
    vecs[:, :k] = u[:, :k] * np.sqrt(s[:k])
    vecs /= np.maximum(vecs.std(), 1e-8)
    return vocab, vecs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data")
    ap.add_argument("--n", type=int, default=10000)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()
    rng = random.Random(args.seed)
    captions = [caption(rng) for _ in range(args.n)]
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "captions.txt"), "w") as f:
        f.write("\n".join(captions) + "\n")
    vocab, vecs = ppmi_svd(captions, args.dim)
    with open(os.path.join(args.out, "embeddings.txt"), "w") as f:
        f.write(f"{len(vocab)} {args.dim}\n")
        for w, v in zip(vocab, vecs):
            f.write(w + " " + " ".join(f"{x:.5f}" for x in v) + "\n")
    print(f"{len(captions)} captions, {len(vocab)} word types")


if __name__ == "__main__":
    main()
