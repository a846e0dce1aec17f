"""Smoke test for the compiled `spoofcue` extension module.

Build and run from the repository root:

    cargo build --release -p spoofcue-py --features extension-module
    cp target/release/libspoofcue_py.so python/spoofcue.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import spoofcue  # noqa: E402

TINY = [
    "patch_size=32",
    "encoder_widths=[4,4,8,8,8]",
    "decoder_widths=[8,8,4,4,4]",
    "classifier_widths=[4,8,8,8]",
    "batch_size=8",
    "epochs=1",
]


def check_metrics():
    # one spoof of 125 accepted, no live rejected
    scores = [0.0] * 10 + [0.5] * 124 + [0.0]
    labels = ["live"] * 10 + ["spoof"] * 125
    pais = ["live"] * 10 + ["print"] * 125
    r = spoofcue.acer_report(scores, labels, pais, threshold=0.01)
    assert r["apcer"] == 1 / 125, r
    assert r["bpcer"] == 0.0, r
    assert math.isclose(r["acer"], 0.004), r
    assert r["apcer_per_pai"] == {"print": 1 / 125}, r

    t = spoofcue.eer_threshold([0.1, 0.2, 0.8, 0.9], ["live", "live", "spoof", "spoof"],
                               ["live", "live", "replay", "replay"])
    assert 0.2 < t < 0.8, t

    try:
        spoofcue.acer_report([0.1], ["maybe"], ["live"])
    except ValueError as e:
        assert "maybe" in str(e)
    else:
        raise AssertionError("bad label accepted")


def check_pipeline(root):
    data = os.path.join(root, "data")
    n = spoofcue.synth_data(data, count=8, size=32, seed=3)
    assert n == 16, n
    manifest = os.path.join(data, "manifest.jsonl")
    summary = spoofcue.train(manifest, os.path.join(root, "ckpt"), overrides=TINY)
    assert summary["global_step"] > 0, summary
    assert math.isfinite(summary["total_loss"]), summary

    model = spoofcue.CueModel(summary["checkpoint"])
    img = os.path.join(data, "live", sorted(os.listdir(os.path.join(data, "live")))[0])
    s = model.score(img)
    h, w, values = model.cue_map(img)
    assert (h, w, len(values)) == (32, 32, 32 * 32 * 3)
    assert math.isclose(s, sum(abs(v) for v in values) / len(values), rel_tol=1e-5)
    assert all(-1.0 <= v <= 1.0 for v in values)

    report = model.evaluate(manifest, dev_eer=True)
    for key in ("apcer", "bpcer", "acer", "hter", "threshold"):
        assert key in report, report

    try:
        spoofcue.CueModel(os.path.join(root, "missing.ckpt"))
    except OSError as e:
        assert "missing.ckpt" in str(e)
    else:
        raise AssertionError("missing checkpoint accepted")
    return report


def main():
    check_metrics()
    with tempfile.TemporaryDirectory() as root:
        report = check_pipeline(root)
    print(f"smoke test passed (tiny model ACER {report['acer']:.3f})")


if __name__ == "__main__":
    main()
