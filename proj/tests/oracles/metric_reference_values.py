"""Freezes reference metric values for tests/unit/test_metrics.cpp.

Scores come from the pycocoevalcap package (the COCO caption evaluation
toolkit), an implementation independent of this repository. Inputs are
already lowercase and punctuation-free so no PTB tokenization is needed.

    pip install --no-deps pycocoevalcap
    python3 tests/oracles/metric_reference_values.py
"""

from pycocoevalcap.bleu.bleu import Bleu
from pycocoevalcap.cider.cider import Cider
from pycocoevalcap.rouge.rouge import Rouge

CASES = [
    ("a man riding a wave on top of a surfboard",
     ["a man riding a wave on a surfboard", "a surfer riding a large wave in the ocean",
      "a person on a surfboard riding a wave"]),
    ("two dogs playing with a frisbee in the grass",
     ["two dogs play with a frisbee on the grass", "a pair of dogs playing in a field with a frisbee"]),
    ("a red bus parked on the side of the street",
     ["a red double decker bus parked on a street", "a bus is parked on the side of the road",
      "a red bus on the side of a city street"]),
    ("a plate of food with broccoli and rice",
     ["a plate of food with rice and broccoli", "a white plate topped with rice and broccoli"]),
    ("a cat sitting on top of a laptop computer",
     ["a cat sitting on a laptop computer keyboard", "a cat laying on top of a laptop",
      "a grey cat sitting on top of an open laptop"]),
    ("a group of people standing around a kitchen",
     ["a group of people standing in a kitchen", "people standing around in a large kitchen"]),
    ("a living room with a couch and a television",
     ["a living room with a couch and a tv", "a living room filled with furniture and a television"]),
    ("a train traveling down the tracks near a station",
     ["a train traveling down train tracks next to a station", "a passenger train pulling into a station"]),
    ("a man holding a tennis racquet on a tennis court",
     ["a man holding a tennis racket on a court", "a tennis player holding a racquet on the tennis court",
      "a man on a tennis court with a racquet"]),
    ("a large clock tower in the middle of a city",
     ["a clock tower in the middle of a city", "a tall clock tower towering over a city street"]),
    ("a woman eating a slice of pizza at a table",
     ["a woman eating a slice of pizza", "a lady sitting at a table eating pizza"]),
    ("a giraffe standing next to a tree in a field",
     ["a giraffe standing next to a tall tree", "a giraffe in a grassy field next to trees"]),
]


def main():
    gts = {i: refs for i, (_, refs) in enumerate(CASES)}
    res = {i: [cand] for i, (cand, _) in enumerate(CASES)}
    _, bleu_each = Bleu(4).compute_score(gts, res, verbose=0)
    _, cider_each = Cider().compute_score(gts, res)
    rouge = Rouge()
    for i, (cand, refs) in enumerate(CASES):
        b = [bleu_each[n][i] for n in range(4)]
        r = rouge.calc_score([cand], refs)
        print(f"    {{{b[0]:.10f}, {b[1]:.10f}, {b[2]:.10f}, {b[3]:.10f}, {r:.10f}, {cider_each[i]:.10f}}},")


if __name__ == "__main__":
    main()
