"""Quick check of the compiled bindings.

Build first:  maturin develop -m crates/python/Cargo.toml --release
"""
import math
import pathlib
import sys
import tempfile

import pyunigrec as ur

ROOT = pathlib.Path(__file__).resolve().parent.parent
FIXTURE = ROOT / "crates" / "core" / "fixtures" / "tiny.toml"


def check(cond, what):
    print(("ok   " if cond else "FAIL ") + what)
    if not cond:
        sys.exit(1)


check(ur.anneal_temperature(0, 10, 0.01, 0.001) == 0.01, "anneal starts at tau_max")
check(abs(ur.anneal_temperature(10, 10, 0.01, 0.001) - 0.001) < 1e-12, "anneal ends at tau_min")
check(abs(ur.collision_rate([[0, 1], [0, 1], [2, 3]]) - 1 / 3) < 1e-12, "collision rate")
check(abs(ur.usage_entropy([[0], [1]], 2)[0] - math.log(2)) < 1e-12, "usage entropy")
check(ur.recall_at_k([4, 2, 9], 9, 3) == 1.0, "recall@k")
check(abs(ur.ndcg_at_k([4, 9], 9, 2) - 1 / math.log2(3)) < 1e-12, "ndcg@k")

items = ur.synth_embeddings(64, 16, 4, 0.5, 7)
check(len(items) == 64 and len(items[0]) == 16, "synthetic embeddings shape")
tok = ur.Tokenizer.pretrain(items, levels=2, codebook_size=8, code_dim=8,
                            encoder_dims=[32], epochs=5)
check(len(tok.history) == 5, "pretrain history")
ids = tok.identifiers(items)
check(len({(tuple(c), d) for c, d in ids}) == 64, "identifiers are unique")
probs = tok.soft_assign(tok.encode(items[:3]), 0, 0.01)
check(all(abs(sum(p) - 1) < 1e-9 for p in probs), "soft assignment rows sum to one")

with tempfile.TemporaryDirectory() as d:
    tok.save(d)
    again = ur.Tokenizer.load(d)
    check(again.identifiers(items) == ids, "tokenizer save/load round trip")

    text = FIXTURE.read_text()
    text = text.replace("epochs = 100", "epochs = 5").replace("max_epochs = 8", "max_epochs = 1")
    cfg = pathlib.Path(d) / "quick.toml"
    cfg.write_text(text)
    exp = ur.Experiment(str(cfg), out=d)
    try:
        exp.run("joint")
        check(False, "joint without prerequisites raises")
    except FileNotFoundError as e:
        check("prepare" in str(e), "missing prerequisite names the producer")
    for c in ["prepare", "train-teacher", "pretrain", "joint", "eval"]:
        check(exp.run(c), c)
    check(not exp.run("eval"), "rerun is a no-op")
    rec = ur.Recommender.load(str(pathlib.Path(exp.run_dir) / "stage2"))
    top = rec.recommend([[1, 2, 3]], beam=10, top_n=5)[0]
    check(len(top) == 5 and all(0 <= i < rec.num_items for i, _ in top), "recommend")

print("all good")
