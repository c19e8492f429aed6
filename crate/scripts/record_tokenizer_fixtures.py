"""Record reference GPT-2 token ids for tokenizer parity tests.

Writes two files into OUT_DIR:
  tokenizer_fixtures.jsonl   {"text": ..., "ids": [...]} per line, from tiktoken
  roundtrip_corpus.txt       1000 synthetic lines for decode(encode(s)) == s

usage: python record_tokenizer_fixtures.py gpt2.tiktoken OUT_DIR
"""
import base64
import json
import random
import sys
from pathlib import Path

import tiktoken

GPT2_PATTERN = r"""'(?:[sdmt]|ll|ve|re)| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""

HANDWRITTEN = [
    "The Great Barrier Reef",
    "The Great Barrier Reef is located off the coast of",
    "The largest coral reef system in the world is located off the coast of",
    "The God of Thunder is the son of",
    "George Washington fought in the",
    "The first president of the United States fought in the",
    "The country of citizenship of the director of Lilli's Marriage is",
    "hello world",
    "Hello, World!",
    "  leading spaces",
    "trailing spaces   ",
    "tabs\tand\nnewlines\n\n",
    "I'm you're they've we'll she'd it's",
    "I'M YOU'RE THEY'VE",
    "numbers 12345 and 3.14159 and 1,000,000",
    "emoji 🙂🚀 and symbols ©®™",
    "naïve café résumé",
    "Ελληνικά κείμενο",
    "日本語のテキスト",
    "中文文本测试",
    "한국어 텍스트",
    "Привет, мир!",
    "مرحبا بالعالم",
    "   ",
    "\n",
    "a",
    " ",
    "!!!???...",
    "https://example.com/path?query=1&x=y",
    "foo_bar-baz.qux",
    "<|endoftext|> is plain text here",
    "x = [1, 2, 3]; y = {'a': 1}",
    "def f(x):\n    return x ** 2\n",
    "The quick brown fox jumps over the lazy dog.",
    "Lorem ipsum dolor sit amet, consectetur adipiscing elit.",
    "A    B     C",
    "multiple\n\n\nblank lines",
    "mixed \t whitespace \r\n endings",
    "'quoted' \"double\" `back`",
    "don't can't won't shouldn't",
]


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    ranks = {}
    for line in src.read_text().splitlines():
        if line:
            tok, rank = line.split()
            ranks[base64.b64decode(tok)] = int(rank)
    enc = tiktoken.Encoding(
        name="gpt2",
        pat_str=GPT2_PATTERN,
        mergeable_ranks=ranks,
        special_tokens={"<|endoftext|>": len(ranks)},
    )

    rng = random.Random(20261017)
    words = [t.decode("utf-8") for t in ranks if len(t) > 1 and t.isascii()]
    extras = ["é", "ß", "日本", "🙂", "\t", "  ", "'s", "'ll", "42", "3.5", "—", "…"]

    def synthetic_line():
        n = rng.randint(1, 14)
        pieces = [rng.choice(words) if rng.random() < 0.85 else rng.choice(extras) for _ in range(n)]
        return "".join(pieces).replace("\n", " ").replace("\r", " ")

    texts = list(HANDWRITTEN)
    while len(texts) < 160:
        texts.append(synthetic_line())

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "tokenizer_fixtures.jsonl", "w") as f:
        for t in texts:
            ids = enc.encode(t, disallowed_special=())
            f.write(json.dumps({"text": t, "ids": ids}, ensure_ascii=False) + "\n")
    with open(out / "roundtrip_corpus.txt", "w") as f:
        for _ in range(1000):
            f.write(synthetic_line() + "\n")


if __name__ == "__main__":
    main()
