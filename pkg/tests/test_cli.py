import argparse
import json
import subprocess
import sys

import pytest

from acmixkit.cli import build_parser, read_detections, run_cli
from acmixkit.data import load_yolo_labels

SMALL_MODEL = ["--img", "160", "--spp-pools", "1", "3", "5"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run_cli(["synth", "--n", "12", "--seed", "3", "--out", str(out), "--format", "text"]) == 0
    return out / "manifest.txt"


def run(capsys, argv):
    code = run_cli(argv)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def test_config_echoed(capsys, dataset):
    code, _, err = run(capsys, ["stats", "--manifest", str(dataset)])
    assert code == 0
    cfg = json.loads(err.split("config: ", 1)[1].splitlines()[0])
    assert cfg["command"] == "stats" and cfg["seed"] == 0


def test_seed_env_fallback(capsys, monkeypatch, dataset):
    monkeypatch.setenv("ACMIXKIT_SEED", "17")
    _, out, err = run(capsys, ["split", "--manifest", str(dataset), "--out", str(dataset.parent / "s17")])
    assert json.loads(out)["seed"] == 17
    monkeypatch.setenv("ACMIXKIT_SEED", "abc")
    assert run(capsys, ["selftest"])[0] == 1


def test_exit_codes(capsys, tmp_path):
    assert run(capsys, ["nonsense"])[0] == 1
    assert run(capsys, ["stats", "--bogus-flag"])[0] == 1
    assert run(capsys, ["stats", "--manifest", str(tmp_path / "missing.txt")])[0] == 2
    (tmp_path / "d.jsonl").write_text("{not json\n")
    assert run(capsys, ["eval", "--dets", str(tmp_path / "d.jsonl"), "--gts", str(tmp_path / "m.txt")])[0] == 2


class TestAnchors:
    def test_table(self, capsys, dataset, tmp_path):
        code, out, _ = run(capsys, ["anchors", "--manifest", str(dataset), "--k", "9", "--seed", "7",
                                    "--img", "640", "--out", str(tmp_path / "a.json")])
        assert code == 0
        lines = out.splitlines()
        assert [ln.split("\t")[0] for ln in lines[:3]] == ["80 × 80(px)", "40 × 40(px)", "20 × 20(px)"]
        assert all(len(ln.split("\t")) == 4 for ln in lines[:3])
        payload = json.loads((tmp_path / "a.json").read_text())
        assert [r["stride"] for r in payload["table"]] == [8, 16, 32]
        assert payload["seed"] == 7

    def test_deterministic(self, capsys, dataset):
        argv = ["anchors", "--manifest", str(dataset), "--seed", "5", "--format", "json"]
        assert run(capsys, argv)[1] == run(capsys, argv)[1]


def test_stats_writes_csvs(capsys, dataset, tmp_path):
    code, out, _ = run(capsys, ["stats", "--manifest", str(dataset), "--out", str(tmp_path)])
    assert code == 0
    assert {p.name for p in tmp_path.iterdir()} == {"class_counts.csv", "locations.csv", "sizes.csv"}
    total = sum(len(im.labels) for im in load_yolo_labels(dataset))
    assert json.loads(out)["labels"] == total


def test_split(capsys, dataset, tmp_path):
    code, out, _ = run(capsys, ["split", "--manifest", str(dataset), "--out", str(tmp_path), "--seed", "2"])
    assert code == 0
    train = (tmp_path / "train.txt").read_text().splitlines()
    test = (tmp_path / "test.txt").read_text().splitlines()
    assert (len(train), len(test)) == (8, 4)
    assert sorted(train + test) == sorted(dataset.read_text().splitlines())


class TestDetect:
    def test_jsonl_and_weights(self, capsys, dataset, tmp_path):
        first, second = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        argv = ["detect", "--manifest", str(dataset), *SMALL_MODEL, "--conf", "0.2", "--seed", "1"]
        assert run(capsys, argv + ["--out", str(first), "--save-weights", str(tmp_path / "w.bin")])[0] == 0
        dets = read_detections(first)
        assert dets, "untrained scores sit near 0.25, so some clear 0.2"
        assert all(0 <= d.bbox.x1 < d.bbox.x2 <= 64 and 0 <= d.bbox.y1 < d.bbox.y2 <= 48 for d in dets)
        assert run(capsys, ["detect", "--manifest", str(dataset), "--weights", str(tmp_path / "w.bin"),
                            "--conf", "0.2", "--out", str(second)])[0] == 0
        assert first.read_bytes() == second.read_bytes()

    def test_bad_pools(self, capsys, dataset):
        assert run(capsys, ["detect", "--manifest", str(dataset), "--img", "160"])[0] == 2


class TestEval:
    def test_perfect_detector(self, capsys, dataset, tmp_path):
        images = load_yolo_labels(dataset)
        lines = [json.dumps({"bbox": list(g.bbox), "class_id": g.class_id, "confidence": 1.0,
                             "image_id": g.image_id}) for im in images for g in im.ground_truth()]
        (tmp_path / "d.jsonl").write_text("\n".join(lines) + "\n")
        code, out, _ = run(capsys, ["eval", "--dets", str(tmp_path / "d.jsonl"), "--gts", str(dataset),
                                    "--iou", "0.5", "--out", str(tmp_path / "rep")])
        assert code == 0
        report = json.loads(out)
        assert report["map50"] == 1.0 and report["map50_95"] == 1.0
        assert (tmp_path / "rep" / "report.json").exists() and (tmp_path / "rep" / "confusion.csv").exists()

    def test_single_mode(self, capsys, dataset, tmp_path):
        (tmp_path / "d.jsonl").write_text("")
        code, out, _ = run(capsys, ["eval", "--dets", str(tmp_path / "d.jsonl"), "--gts", str(dataset),
                                    "--iou-mode", "single", "--format", "text"])
        assert code == 0
        assert "mAP@0.95\t0.0000" in out


def test_reparam_check(capsys):
    code, out, _ = run(capsys, ["reparam-check", "--trials", "5"])
    assert code == 0 and json.loads(out)["passed"]


def test_bench(capsys):
    code, out, _ = run(capsys, ["bench", "--img", "64", "--spp-pools", "1", "1", "1", "--width-multiple", "0.25",
                                "--warmup", "1", "--iters", "10"])
    assert code == 0
    assert json.loads(out)["results"][0]["fps"] > 0


def test_selftest(capsys):
    code, out, _ = run(capsys, ["selftest", "--format", "text"])
    assert code == 0
    assert out.count("PASS") == 5 and "FAIL" not in out


def test_help_lists_defaults():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    bench = sub.choices["bench"].format_help()
    for needle in ("--iters", "default: 100", "--warmup", "default: 10", "--img"):
        assert needle in bench
    eval_help = sub.choices["eval"].format_help()
    assert "default: sweep" in eval_help and "default: 0.5" in eval_help
    for name, p in sub.choices.items():
        text = " ".join(p.format_help().split())
        for action in p._actions:
            if action.option_strings and action.default not in (None, argparse.SUPPRESS):
                assert f"(default: {action.default})" in text, (name, action.dest)


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "acmixkit.cli", "selftest"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["passed"] is True
    assert proc.stderr.startswith("config: ")
