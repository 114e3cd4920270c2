import json

import pytest

from conftest import FIXTURES
from opendet_lab.cli import main
from opendet_lab.plotting import envelope_area

SMOKE = """total_iterations=120
warmup_iterations=10
embed_dim=8
eval_per_cluster=30
eval_background=30
upl.beta={beta}
ic.gamma_0={gamma}
world.cluster_stddev=0.7
"""


def cfg(tmp_path, beta=0.5, gamma=0.1):
    p = tmp_path / f"run_{beta}_{gamma}.cfg"
    p.write_text(SMOKE.format(beta=beta, gamma=gamma))
    return p


def test_train_writes_artifacts_and_is_reproducible(tmp_path):
    c = cfg(tmp_path)
    assert main(["train", "--config", str(c), "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(c), "--out", str(tmp_path / "b")]) == 0
    for name in ("telemetry.csv", "report.csv", "summary.csv", "latent.csv", "checkpoint.bin", "config.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["command"] == "train" and "telemetry.csv" in man["artifacts"]
    assert man["config"]["trainer"]["upl"]["beta"] == 0.5


def test_train_replays_from_resolved_config(tmp_path):
    c = cfg(tmp_path)
    main(["train", "--config", str(c), "--out", str(tmp_path / "a")])
    main(["train", "--config", str(tmp_path / "a" / "config.txt"), "--out", str(tmp_path / "r")])
    assert (tmp_path / "a" / "telemetry.csv").read_bytes() == (tmp_path / "r" / "telemetry.csv").read_bytes()


def test_seed_flag_changes_run(tmp_path):
    c = cfg(tmp_path)
    main(["train", "--config", str(c), "--seed", "1", "--out", str(tmp_path / "s1")])
    main(["train", "--config", str(c), "--seed", "2", "--out", str(tmp_path / "s2")])
    assert (tmp_path / "s1" / "telemetry.csv").read_bytes() != (tmp_path / "s2" / "telemetry.csv").read_bytes()


def test_train_missing_key(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("total_iterations=10\nupl.beta=0\n")
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "x")]) == 2
    assert "ic.gamma_0" in capsys.readouterr().err


def test_train_divergence_exit_code(tmp_path):
    p = tmp_path / "div.cfg"
    p.write_text(SMOKE.format(beta=0.5, gamma=0.1) + "learning_rate=1e308\n")
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "d")]) == 1
    assert (tmp_path / "d" / "diverged.json").exists()


def test_eval_fixture_and_reproducible(tmp_path):
    args = ["eval", "--gt", str(FIXTURES / "eval" / "gt.json"), "--det", str(FIXTURES / "eval" / "det.json")]
    assert main(args + ["--out", str(tmp_path / "e1")]) == 0
    assert main(args + ["--out", str(tmp_path / "e2")]) == 0
    a = (tmp_path / "e1" / "report.csv").read_bytes()
    assert a == (tmp_path / "e2" / "report.csv").read_bytes()
    rep = json.loads((tmp_path / "e1" / "report.json").read_text())
    want = json.loads((FIXTURES / "eval" / "expected.json").read_text())["float"]
    for k, v in want.items():
        assert rep[k] == pytest.approx(v, rel=1e-12), k


def test_eval_flags(tmp_path):
    args = ["eval", "--gt", str(FIXTURES / "eval" / "gt.json"), "--det", str(FIXTURES / "eval" / "det.json")]
    main(args + ["--score-floor", "0.6", "--out", str(tmp_path / "hi")])
    main(args + ["--recall-level", "0.2", "--iou", "0.3", "--out", str(tmp_path / "lo")])
    hi = json.loads((tmp_path / "hi" / "report.json").read_text())
    assert hi["AOSE"] <= 3
    man = json.loads((tmp_path / "lo" / "manifest.json").read_text())
    assert man["config"]["recall_level"] == 0.2 and man["config"]["iou"] == 0.3


def test_eval_empty_detections(tmp_path):
    det = tmp_path / "empty.json"
    det.write_text("[]")
    assert main(["eval", "--gt", str(FIXTURES / "eval" / "gt.json"), "--det", str(det),
                 "--out", str(tmp_path / "e")]) == 0
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    assert rep["mAP_K"] == 0 and rep["AP_U"] == 0 and rep["AOSE"] == 0


def test_eval_perfect_detections(tmp_path):
    gt = json.loads((FIXTURES / "eval" / "gt.json").read_text())
    dets = [{"image_id": a["image_id"], "category_id": a["category_id"] if a["category_id"] in (1, 2) else 99,
             "bbox": a["bbox"], "score": 0.9} for a in gt["annotations"]]
    p = tmp_path / "perfect.json"
    p.write_text(json.dumps(dets))
    main(["eval", "--gt", str(FIXTURES / "eval" / "gt.json"), "--det", str(p), "--out", str(tmp_path / "e")])
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    assert rep["mAP_K"] == 100.0 and rep["WI"] == 0 and rep["AOSE"] == 0


def test_eval_parse_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"detections": [{"id": 5, "image_id": 1, "category_id": 1,
                                               "bbox": [0, 0, -1, 1], "score": 0.5}]}))
    assert main(["eval", "--gt", str(FIXTURES / "eval" / "gt.json"), "--det", str(bad),
                 "--out", str(tmp_path / "e")]) == 2
    assert "id 5" in capsys.readouterr().err


def split_args(spec, out):
    return ["split", "--spec", str(FIXTURES / "split" / spec),
            "--known-source", str(FIXTURES / "split" / "known_source.json"),
            "--open-source", str(FIXTURES / "split" / "open_source.json"), "--out", str(out)]


def test_split_t2_equal_counts(tmp_path):
    assert main(split_args("t2_spec.json", tmp_path / "s")) == 0
    m = json.loads((tmp_path / "s" / "split.json").read_text())
    assert m["open_set"]["known_images"] == m["open_set"]["open_images"]


def test_split_t1_recount(tmp_path):
    main(split_args("t1_spec.json", tmp_path / "s"))
    m = json.loads((tmp_path / "s" / "split.json").read_text())
    groups = {10, 11, 12}
    for im in m["images"]:
        assert any(a["category_id"] in groups for a in m["annotations"] if a["image_id"] == im["id"])


def test_split_shortfall(tmp_path, capsys):
    assert main(split_args("t2_shortfall_spec.json", tmp_path / "s")) == 2
    assert "shortfall" in capsys.readouterr().err


def test_split_output_feeds_eval(tmp_path):
    main(split_args("t2_spec.json", tmp_path / "s"))
    split = tmp_path / "s" / "split.json"
    assert main(["eval", "--gt", str(split), "--det", str(FIXTURES / "eval" / "det.json"),
                 "--split", str(split), "--out", str(tmp_path / "e")]) in (0, 2)


def test_gradcheck_commands(tmp_path, capsys):
    assert main(["gradcheck", "--seed", "3", "--trials", "3", "--out", str(tmp_path / "g")]) == 0
    out = capsys.readouterr().out
    assert "joint[model]" in out and "FAIL" not in out
    assert main(["gradcheck", "--trials", "0"]) == 0


def test_gradcheck_failure_exit(monkeypatch):
    import opendet_lab.cli as cli
    from opendet_lab.gradcheck import GradcheckRow
    monkeypatch.setattr(cli, "run_gradcheck", lambda seed, trials: [GradcheckRow("ce", trials, 1.0, False)])
    assert main(["gradcheck", "--trials", "2"]) == 1


def test_plot_commands(tmp_path):
    assert main(["plot", "--kind", "weighting_curves", "--alphas", "1", "--out", str(tmp_path / "w")]) == 0
    r = [line.split(",") for line in (tmp_path / "w" / "weighting_curves.csv").read_text().splitlines()[1:]
         if line.startswith("polynomial,")]
    best = max(r, key=lambda x: float(x[3]))
    assert (float(best[2]), float(best[3])) == (0.5, 0.25)

    assert main(["plot", "--kind", "pr_curve", "--input", str(FIXTURES / "pr_5_6.json"),
                 "--out", str(tmp_path / "p")]) == 0
    assert envelope_area((tmp_path / "p" / "pr_curve.csv").read_text()) == pytest.approx(5 / 6)

    lat = tmp_path / "lat.csv"
    lat.write_text("index,label,cluster,z0,z1\n0,0,0,0.1,0.2\n1,5,5,0.9,0.4\n")
    assert main(["plot", "--kind", "latent_scatter", "--input", str(lat), "--unknown-label", "5",
                 "--out", str(tmp_path / "l")]) == 0
    assert (tmp_path / "l" / "latent_scatter.svg").read_text().count('class="marker"') == 2


def test_plot_empty_input(tmp_path):
    lat = tmp_path / "lat.csv"
    lat.write_text("index,label,cluster,z0\n")
    assert main(["plot", "--kind", "latent_scatter", "--input", str(lat), "--out", str(tmp_path / "l")]) == 2
    empty = tmp_path / "pr.json"
    empty.write_text('{"tp": [], "scores": [], "num_gt": 1}')
    assert main(["plot", "--kind", "pr_curve", "--input", str(empty), "--out", str(tmp_path / "p")]) == 2
