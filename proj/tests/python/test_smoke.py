import json

import pytest

import gisp

TINY = {
    "model": {"n_layers": 4, "n_heads": 2, "d_model": 8, "d_head": 4, "d_ff": 6, "max_seq_len": 32},
    "train": {"steps": 10, "batch": 2, "warmup": 2},
    "calibration": {"samples": 4, "seq_len": 16},
    "schedule": {"target_ratio": 0.5, "n_iterations": 6},
    "eval": {"sequences": 4, "seq_len": 16, "qa_items": 8},
}


@pytest.fixture(scope="module")
def lab(tmp_path_factory):
    root = tmp_path_factory.mktemp("lab")
    gisp.make_data(root, corpus_bytes=20000, qa_items=30, seed=3)
    config = dict(TINY, corpus=str(root / "corpus.txt"), qa_file=str(root / "qa_facts.jsonl"))
    ckpt = root / "dense.ckpt"
    info = gisp.train(config, ckpt)
    return root, config, ckpt, info


def test_defaults_and_validation():
    d = gisp.default_config()
    assert d["schedule"]["n_iterations"] == 32
    assert gisp.effective_config({})["model"] == d["model"]
    with pytest.raises(gisp.UsageError):
        gisp.effective_config({"no_such_key": 1})
    assert issubclass(gisp.UsageError, gisp.Error)


def test_train_writes_manifest(lab):
    root, config, ckpt, info = lab
    assert len(info["fingerprint"]) == 16
    manifest = json.loads((root / "dense.ckpt.manifest.json").read_text())
    assert manifest["fingerprint"] == info["fingerprint"]
    assert gisp.checkpoint_info(ckpt)["fingerprint"] == info["fingerprint"]


def test_prune_trace_and_reconstruct(lab):
    root, config, ckpt, _ = lab
    out = root / "gisp"
    res = gisp.prune(config, ckpt, method="gisp", milestones=[0.25, 0.5], out_dir=out)
    assert res["pruned_fraction"] >= 0.5 - 1e-9
    assert gisp.canonical_trace(res["trace"]) == res["trace"]
    assert gisp.trace_check(out / "trace.jsonl") == (True, "")
    k = gisp.reconstruct(out / "trace.jsonl", ckpt, root / "r25.ckpt", ratio=0.25)
    assert k >= 1
    assert (root / "r25.ckpt").read_bytes() == (out / "milestone_25.ckpt").read_bytes()
    prof = gisp.sparsity_profile(out / "trace.jsonl", ckpt)
    assert prof[0]["attn_kept"] == 1.0 and prof[-1]["mlp_kept"] == 1.0
    with pytest.raises(gisp.UsageError):
        gisp.reconstruct(out / "trace.jsonl", ckpt, root / "x.ckpt", iteration=999)


def test_eval_and_sweep(lab):
    root, config, ckpt, _ = lab
    a = gisp.evaluate(config, ckpt)
    b = gisp.evaluate(config, ckpt)
    assert a == b
    assert a["perplexity"] > 1.0
    rows = gisp.sweep(config, ckpt, ["gisp", "wanda_sp"], [0.3], seeds=[0])
    assert [r["method"] for r in rows] == ["gisp", "wanda_sp"]
    assert gisp.prune(config, ckpt, method="wanda_sp", ratio=0.3)["trace"] is None


def test_errors_map_to_exceptions(lab):
    root, config, ckpt, _ = lab
    with pytest.raises(gisp.UsageError):
        gisp.prune(config, ckpt, method="nope")
    with pytest.raises(gisp.ConstraintError):
        gisp.prune(config, ckpt, method="magnitude", ratio=0.99)
    with pytest.raises(gisp.UsageError):
        gisp.train(dict(config, corpus=str(root / "missing.txt")), root / "m.ckpt")
