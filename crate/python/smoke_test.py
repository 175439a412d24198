#!/usr/bin/env python3
"""Smoke test for the emofuse Python extension.

Locates the cdylib built by cargo (no maturin needed), imports it, and runs a
miniature end-to-end pass: corpus generation, a two-epoch training run, an
evaluation, the CCC metric against a hand value, and the gradient checker.

Usage:
    cargo build -p emofuse-py
    python3 python/smoke_test.py
"""

import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_extension():
    candidates = [
        REPO / "target" / "debug" / "libemofuse.so",
        REPO / "target" / "release" / "libemofuse.so",
        REPO / "target" / "debug" / "libemofuse.dylib",
        REPO / "target" / "release" / "libemofuse.dylib",
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit("build the extension first: cargo build -p emofuse-py")
    stage = Path(tempfile.mkdtemp(prefix="emofuse_py_"))
    suffix = ".so" if built.suffix == ".so" else ".so"  # abi3 module name
    shutil.copy(built, stage / f"emofuse{suffix}")
    sys.path.insert(0, str(stage))
    import emofuse

    return emofuse


def main():
    emofuse = import_extension()
    print(f"imported emofuse {emofuse.__version__}")

    work = Path(tempfile.mkdtemp(prefix="emofuse_smoke_"))
    spec = {
        "n_train_utterances": 6,
        "n_devel_utterances": 2,
        "frames_per_utterance": 8,
        "widths": {
            "egemaps": 10,
            "mfcc": 6,
            "boaw_e": 8,
            "boaw_m": 8,
            "deep_spectrum": 12,
        },
    }
    manifest = emofuse.generate_corpus(str(work / "corpus"), json.dumps(spec), 11)
    print(f"corpus at {manifest}")

    config = {
        "seed": 3,
        "k": 4,
        "d_e": 3,
        "d_k": 3,
        "k_nn": 2,
        "encoder_hidden": [5, 4],
        "head_hidden": [5, 4],
        "epochs": 2,
        "batch_size": 3,
        "targets": ["arousal"],
        "strategy": "ttf_amef",
        "manifest": manifest,
        "out_dir": str(work / "run"),
    }
    metrics = json.loads(emofuse.train(json.dumps(config)))
    assert len(metrics["epochs"]) == 2, metrics
    assert 1.0 <= metrics["epochs"][0]["train_loss"]["arousal"] <= 3.0
    print(f"trained: best epoch {metrics['best_epoch']}, "
          f"devel ccc {metrics['best_devel_ccc']}")

    scores = emofuse.evaluate(str(work / "run" / "checkpoint.json"), manifest)
    assert "arousal" in scores and abs(scores["arousal"]) <= 1.0
    print(f"evaluated: {scores}")

    # CCC sanity: perfect agreement and a hand-checked anti-agreement.
    a = [0.1, -0.4, 0.3, 0.8, -0.2]
    assert emofuse.ccc(a, a)["ccc"] == 1.0
    mean = sum(a) / len(a)
    centered = [v - mean for v in a]
    anti = emofuse.ccc(centered, [-v for v in centered])
    assert math.isclose(anti["ccc"], -1.0, abs_tol=1e-9), anti
    grad = emofuse.ccc_loss_grad(a, a)
    assert all(abs(g) <= 1e-8 for g in grad)

    max_err, rows = emofuse.run_gradcheck()
    assert max_err <= 1e-4, rows
    print(f"gradcheck max relative error {max_err:.2e} over {len(rows)} layers")

    print("OK")


if __name__ == "__main__":
    main()
