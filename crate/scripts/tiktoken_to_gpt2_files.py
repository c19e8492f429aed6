"""Rebuild GPT-2 `vocab.json` + `merges.txt` from a `gpt2.tiktoken` rank file.

The rank file lists every GPT-2 token as base64 bytes with its id. Merge rules
are recovered by re-running byte-pair merging on each token restricted to
lower ranks, which splits it into exactly the pair that produced it.

usage: python tiktoken_to_gpt2_files.py gpt2.tiktoken OUT_DIR
"""
import base64
import json
import sys
from pathlib import Path


def bytes_to_unicode():
    bs = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("¡"), ord("¬") + 1))
        + list(range(ord("®"), ord("ÿ") + 1))
    )
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


def bpe_split(ranks, token, max_rank):
    parts = [bytes([b]) for b in token]
    while True:
        best = None
        for i in range(len(parts) - 1):
            r = ranks.get(parts[i] + parts[i + 1])
            if r is not None and r < max_rank and (best is None or r < best[0]):
                best = (r, i)
        if best is None:
            return parts
        i = best[1]
        parts = parts[:i] + [parts[i] + parts[i + 1]] + parts[i + 2 :]


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    ranks = {}
    for line in src.read_text().splitlines():
        if line:
            tok, rank = line.split()
            ranks[base64.b64decode(tok)] = int(rank)
    enc = bytes_to_unicode()
    to_str = lambda bs: "".join(enc[b] for b in bs)

    vocab = {to_str(tok): rank for tok, rank in ranks.items()}
    vocab["<|endoftext|>"] = len(ranks)
    merges = []
    for tok, rank in sorted(ranks.items(), key=lambda kv: kv[1]):
        if len(tok) == 1:
            continue
        pair = bpe_split(ranks, tok, rank)
        assert len(pair) == 2, (tok, pair)
        merges.append(f"{to_str(pair[0])} {to_str(pair[1])}")

    out.mkdir(parents=True, exist_ok=True)
    (out / "vocab.json").write_text(json.dumps(vocab, ensure_ascii=False))
    (out / "merges.txt").write_text("#version: 0.2\n" + "\n".join(merges) + "\n")


if __name__ == "__main__":
    main()
