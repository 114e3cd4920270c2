"""Regenerate tests/fixtures/eval/expected.json from the brute-force oracle.

Reads gt.json and det.json as raw JSON (no package code) and writes the
exact rational values plus their float versions, all metrics in percent.
"""
import json
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "tests"))

import oracle  # noqa: E402


def main(fixture_dir=ROOT / "tests" / "fixtures" / "eval"):
    gt = json.loads((fixture_dir / "gt.json").read_text())
    det = json.loads((fixture_dir / "det.json").read_text())
    det = det["detections"] if isinstance(det, dict) else det
    block = gt["open_set"]
    known, unknown = block["known_category_ids"], set(block["unknown_category_ids"])
    label = block["unknown_label"]

    gts = [(a["image_id"], a["category_id"], a["bbox"], a["category_id"] in unknown) for a in gt["annotations"]]
    dets = [(d["image_id"], d["category_id"], d["score"], d["bbox"]) for d in det]
    res = oracle.evaluate(gts, dets, known, label)

    exact = {"mAP_K": 100 * res["map_k"], "WI": res["wi"], "AOSE": res["aose"], "AP_U": 100 * res["ap_u"],
             "TP_K": res["tp_k"], "FP_K": res["fp_k"], "FP_U": res["fp_u"]}
    exact.update({f"AP[{c}]": 100 * v for c, v in res["per_class"].items()})
    doc = {"exact": {k: str(v) for k, v in sorted(exact.items())},
           "float": {k: float(v) for k, v in sorted(exact.items())}}
    out = fixture_dir / "expected.json"
    out.write_text(json.dumps(doc, indent=2) + "\n")
    print(f"wrote {out}")
    for k, v in doc["exact"].items():
        print(f"  {k:8s} {v}")


if __name__ == "__main__":
    main()
