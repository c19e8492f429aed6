"""Export a small randomly initialised GPT-2 into the engine's archive layout and
record its reference logits, for forward-pass parity tests without a real
checkpoint.

Also writes a truncated GPT-2 tokenizer (the 256 byte tokens plus the first 64
merges) whose ids line up with the model's 320-entry vocabulary.

usage: python record_tiny_model_fixture.py GPT2_TOKENIZER_DIR OUT_DIR
"""
import json
import sys
from pathlib import Path

import numpy as np
import torch
from safetensors.numpy import save_file
from transformers import GPT2Config, GPT2LMHeadModel


def main():
    gpt2_dir, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    vocab_size, n_merges = 320, 64
    full = json.loads((gpt2_dir / "vocab.json").read_text())
    small = {tok: i for tok, i in full.items() if i < vocab_size}
    assert len(small) == vocab_size
    (out / "vocab.json").write_text(json.dumps(small, ensure_ascii=False))
    lines = (gpt2_dir / "merges.txt").read_text().splitlines()
    (out / "merges.txt").write_text("\n".join(lines[: n_merges + 1]) + "\n")

    torch.manual_seed(1234)
    cfg = GPT2Config(
        vocab_size=vocab_size, bos_token_id=None, eos_token_id=None, n_positions=32, n_embd=24, n_layer=3, n_head=4,
        layer_norm_epsilon=1e-5, resid_pdrop=0.0, embd_pdrop=0.0, attn_pdrop=0.0,
    )
    model = GPT2LMHeadModel(cfg).eval()
    # Untrained GPT-2 init leaves layer-norm gains at 1 and biases at 0; perturb
    # them so the parity check exercises every parameter.
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "ln" in name or name.endswith(".bias"):
                p.add_(0.1 * torch.randn_like(p))
    sd = {k: v.detach().numpy().astype(np.float32) for k, v in model.state_dict().items()}
    d = cfg.n_embd

    t = {"wte": sd["transformer.wte.weight"], "wpe": sd["transformer.wpe.weight"]}
    for i in range(cfg.n_layer):
        p = f"transformer.h.{i}."
        q = f"h.{i}."
        t[q + "ln_1.g"] = sd[p + "ln_1.weight"]
        t[q + "ln_1.b"] = sd[p + "ln_1.bias"]
        w, b = sd[p + "attn.c_attn.weight"], sd[p + "attn.c_attn.bias"]
        for k, name in enumerate(["wq", "wk", "wv"]):
            t[q + f"attn.{name}.w"] = w[:, k * d:(k + 1) * d]
            t[q + f"attn.{name}.b"] = b[k * d:(k + 1) * d]
        t[q + "attn.wo.w"] = sd[p + "attn.c_proj.weight"]
        t[q + "attn.wo.b"] = sd[p + "attn.c_proj.bias"]
        t[q + "ln_2.g"] = sd[p + "ln_2.weight"]
        t[q + "ln_2.b"] = sd[p + "ln_2.bias"]
        t[q + "mlp.wi.w"] = sd[p + "mlp.c_fc.weight"]
        t[q + "mlp.wi.b"] = sd[p + "mlp.c_fc.bias"]
        t[q + "mlp.wf.w"] = sd[p + "mlp.c_proj.weight"]
        t[q + "mlp.wf.b"] = sd[p + "mlp.c_proj.bias"]
    t["ln_f.g"] = sd["transformer.ln_f.weight"]
    t["ln_f.b"] = sd["transformer.ln_f.bias"]
    t["wu"] = sd["lm_head.weight"].T
    t = {k: np.ascontiguousarray(v) for k, v in t.items()}
    meta = {
        "n_layer": str(cfg.n_layer), "n_head": str(cfg.n_head), "d_model": str(d),
        "n_ctx": str(cfg.n_positions), "vocab_size": str(cfg.vocab_size),
        "layer_norm_eps": "1e-5", "attention": "gpt2",
    }
    save_file(t, out / "model.safetensors", metadata=meta)

    rng = np.random.default_rng(99)
    with open(out / "logits.jsonl", "w") as f:
        for n in [1, 2, 5, 9, 17, 32]:
            ids = rng.integers(0, cfg.vocab_size, size=n).tolist()
            with torch.no_grad():
                logits = model(torch.tensor([ids])).logits[0].numpy()
            f.write(json.dumps({"ids": ids, "logits": logits.tolist()}) + "\n")


if __name__ == "__main__":
    main()
