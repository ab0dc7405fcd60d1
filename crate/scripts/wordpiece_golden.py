"""Regenerate the WordPiece fixture vocabulary and the reference outputs
used by the tokenizer tests.

Requires the `transformers` package; its BertTokenizer (lowercasing, no
accent stripping, no CJK splitting) is the reference implementation.

    python3 scripts/wordpiece_golden.py crates/core/tests/data
"""

import string
import sys
from pathlib import Path

from transformers import BertTokenizer

WORDS = [
    "information", "infromation", "unaffable", "playing", "played",
    "running", "tokenization", "tokenizer", "retrieval", "retreival",
    "queries", "informations", "INFROMATION", "searching", "Information",
    "hello!", "don't", "state-of-the-art", "(dense)", "2019",
    "zzzz", "x", "naïve", "a" * 100, "a" * 101,
]

PIECES = """the in information ##fr ##oma ##tion ##s un ##aff ##able play ##ing
##ed run ##ning token ##ization ##izer ##ize search engine re ##trie ##val
retrieval dense typo query ##ies que ##ry hello don state of art""".split()


def vocab():
    tokens = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    tokens += list(string.punctuation)
    tokens += list(string.ascii_lowercase) + list(string.digits)
    tokens += ["##" + c for c in string.ascii_lowercase + string.digits]
    for p in PIECES:
        if p not in tokens:
            tokens.append(p)
    return tokens


def main(out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    vocab_path = out / "wordpiece_vocab.txt"
    vocab_path.write_text("\n".join(vocab()) + "\n")
    tok = BertTokenizer(
        str(vocab_path), do_lower_case=True, strip_accents=False, tokenize_chinese_chars=False
    )
    assert len(WORDS) == 25
    with open(out / "wordpiece_golden.tsv", "w") as f:
        for w in WORDS:
            f.write(w + "\t" + " ".join(tok.tokenize(w)) + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/data")
