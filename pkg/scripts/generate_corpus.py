"""Regenerates the vendored default corpus (assets/corpus.txt).

The file is deterministic synthetic English-like prose: seeded template
sentences over a fixed word list, grouped into paragraphs. It exists so the
repository trains a character-level model with zero downloads; rerunning this
script reproduces the file byte for byte.
"""

from pathlib import Path

import numpy as np

SEED = 20240614
TARGET_CHARS = 1_000_000

NOUNS = """time year way day thing man world life hand part child eye woman place work week
case point company number group problem fact money water month book line city business night
question story job word side kind head house service friend father power hour game room area
market door party fire tree river garden bridge mountain valley window letter road stone ship
teacher student doctor farmer sailor painter miller baker hunter rider king queen soldier
bird horse dog cat fish wolf bear fox deer mouse lamp table chair basket bottle spoon knife
village town field forest meadow harbor island shore coast cliff cloud storm wind rain snow
morning evening summer winter spring autumn journey voyage path trail song tale dream memory
thought silence sound voice light shadow color taste smell breath heart mind spirit courage
truth honor doubt hope fear joy sorrow anger peace war treaty crown sword shield banner map
engine wheel anchor compass sail deck mast rope chain nail hammer saw plow seed grain bread
butter cheese honey apple pear plum cherry berry root leaf branch bark moss fern reed rush""".split()

VERBS = """said made went took came saw looked found gave told asked worked called tried left
felt kept began held wrote stood heard meant met ran paid sat spoke lay led read grew lost
fell sent built drew broke spent cut rose sold caught chose carried walked turned moved lived
opened closed watched followed stopped started waited remembered forgot learned taught played
sang danced laughed wept traveled crossed climbed descended entered departed gathered scattered
planted harvested mended folded lifted lowered pushed pulled threw tossed measured weighed
counted traded borrowed lent promised refused agreed argued whispered shouted wondered hoped""".split()

ADJECTIVES = """old new great little good small large young long high low early late strong
welcome bright dark quiet loud warm cold deep shallow broad narrow heavy light swift slow
gentle rough smooth sharp dull clean dusty golden silver wooden iron stone green blue red
white black gray brown pale vivid plain fancy simple curious careful careless patient eager
honest clever foolish brave timid proud humble weary rested hungry thirsty distant nearby
ancient modern common rare certain doubtful pleasant bitter sweet sour salty fresh stale""".split()

ADVERBS = """slowly quickly quietly loudly carefully eagerly gladly sadly soon late often
rarely always never sometimes almost nearly quite rather very too again still yet once twice
together apart forward backward upward downward inward outward nevertheless meanwhile""".split()

PREPOSITIONS = "in on at by near under over beyond behind beside between among through across along around toward within without".split()

NAMES = """Alder Bram Cedric Dora Edmund Flora Gideon Hazel Ivo Juniper Kester Lena Magnus
Nora Osric Petra Quill Rowan Sable Tamsin Ulric Vera Wystan Yara Arletta Barnaby Cosima""".split()

TEMPLATES = [
    "The {adj} {noun} {verb} the {noun} near the {noun}.",
    "{name} {verb} {adv} toward the {adj} {noun}.",
    "A {noun} and a {noun} {verb} {prep} the {adj} {noun}.",
    "When the {noun} {verb}, the {adj} {noun} {verb} {adv}.",
    "{name} and {name} {verb} the {noun} {prep} the {noun}.",
    "Every {noun} {verb} some {adj} {noun} {prep} the {noun}.",
    "The {noun} {verb} {adv}, and the {noun} {verb} {adv}.",
    "No {adj} {noun} ever {verb} the {noun} {prep} that {adj} {noun}.",
    "After the {adj} {noun}, {name} {verb} a {noun} of {noun}.",
    "It was the {noun} that {verb} the {adj} {noun} {adv}.",
    "{adv} the {adj} {noun} {verb}; the {noun} {verb} {prep} the {noun}.",
    "Perhaps a {adj} {noun} {verb} {prep} the {noun}, or perhaps it {verb} {adv}.",
    "In the {noun} of the {noun}, the {adj} {noun} {verb}.",
    "{name} {verb} that the {noun} {verb} {prep} a {adj} {noun}.",
    "The {number} {noun} {verb} {prep} the {adj} {noun}.",
]

POOLS = {
    "noun": NOUNS,
    "verb": VERBS,
    "adj": ADJECTIVES,
    "adv": ADVERBS,
    "prep": PREPOSITIONS,
    "name": NAMES,
}


def fill(template: str, rng: np.random.Generator) -> str:
    out = []
    i = 0
    while i < len(template):
        if template[i] == "{":
            j = template.index("}", i)
            key = template[i + 1:j]
            if key == "number":
                out.append(str(int(rng.integers(2, 99))))
            else:
                pool = POOLS[key]
                out.append(pool[int(rng.integers(0, len(pool)))])
            i = j + 1
        else:
            out.append(template[i])
            i += 1
    sentence = "".join(out)
    return sentence[0].upper() + sentence[1:]


def main() -> None:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(SEED)))
    parts = []
    total = 0
    while total < TARGET_CHARS:
        n_sentences = int(rng.integers(3, 9))
        sentences = [fill(TEMPLATES[int(rng.integers(0, len(TEMPLATES)))], rng)
                     for _ in range(n_sentences)]
        paragraph = " ".join(sentences) + "\n\n"
        parts.append(paragraph)
        total += len(paragraph)
    text = "".join(parts)[:TARGET_CHARS]
    out_path = Path(__file__).parent.parent / "src" / "smoelab" / "assets" / "corpus.txt"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(text, encoding="utf-8")
    print(f"wrote {out_path} ({len(text)} chars, {len(set(text))} distinct)")


if __name__ == "__main__":
    main()
