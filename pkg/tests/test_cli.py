import hashlib
import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from valence_patching.cli import main
from valence_patching.corpus import default_corpus_dir

TABLES = [
    "flip", "layer_dissociation_by_domain", "layer_dissociation_overall", "patch_effects",
    "patch_vs_gap_by_domain", "patch_vs_gap_overall", "scores_by_domain", "scores_overall", "steering",
]


def _digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def inputs(tmp_path_factory):
    root = tmp_path_factory.mktemp("inputs")
    assert main(["make-toy-model", "--out", str(root / "model"), "--seed", "1"]) == 0
    shutil.copytree(default_corpus_dir(), root / "corpus")
    return root


def _run_args(inputs, out, *extra):
    return ["--model", str(inputs / "model"), "--corpus", str(inputs / "corpus"), "--out", str(out),
            "--anchors", "toy", "--limit", "4", "--n-pairs", "3", *extra]


@pytest.fixture(scope="module")
def report(inputs, tmp_path_factory):
    before = _digest(inputs)
    out = tmp_path_factory.mktemp("run") / "a"
    assert main(["report", *_run_args(inputs, out)]) == 0
    assert _digest(inputs) == before
    return out


def test_validate_corpus(capsys, inputs):
    assert main(["validate-corpus", "--corpus", str(inputs / "corpus")]) == 0
    assert capsys.readouterr().out.startswith("ok: 200 pairs, 100 aligned ids")


def test_validate_broken_corpus(tmp_path, capsys, inputs):
    shutil.copytree(inputs / "corpus", tmp_path / "c")
    lines = (tmp_path / "c" / "pairs.jsonl").read_text().splitlines()
    (tmp_path / "c" / "pairs.jsonl").write_text("\n".join(lines[:-1] + [lines[0]]) + "\n")
    assert main(["validate-corpus", "--corpus", str(tmp_path / "c")]) == 1
    assert "error:" in capsys.readouterr().err


def test_report_emits_every_table(report):
    manifest = json.loads((report / "manifest.json").read_text())
    h = manifest["manifest_sha256"]
    for name in TABLES:
        lines = (report / "tables" / f"{name}.tsv").read_text().splitlines()
        assert lines[0] == f"# manifest_sha256={h}"
        assert len(lines) >= 3, name
    for name in ("scores.jsonl", "sweeps.jsonl", "flip.jsonl", "steer_good_news.jsonl"):
        recs = [json.loads(x) for x in (report / name).read_text().splitlines()]
        assert recs and all(r["manifest_sha256"] == h for r in recs)
    for fig in ("layer_scatter.svg", "gap_distributions.png", "patch_vs_gap.png", "steering_curves.png"):
        assert (report / "figures" / fig).stat().st_size > 0
    assert h in (report / "heatmaps" / "heatmap_0_good_news.svg").read_text()
    assert len((report / "scores.jsonl").read_text().splitlines()) == 8


def test_rerun_is_byte_identical(report, inputs, tmp_path):
    out = tmp_path / "b"
    assert main(["report", *_run_args(inputs, out, "--workers", "2")]) == 0
    a, b = _digest(report), _digest(out)
    a.pop("manifest.json"), b.pop("manifest.json")
    assert a == b
    ma = json.loads((report / "manifest.json").read_text())
    mb = json.loads((out / "manifest.json").read_text())
    assert ma["manifest_sha256"] == mb["manifest_sha256"]


def test_manifest_conflict(tmp_path, inputs, capsys):
    out = tmp_path / "c"
    assert main(["score", *_run_args(inputs, out)]) == 0
    assert main(["score", *_run_args(inputs, out, "--seed", "9")]) == 1
    err = capsys.readouterr().err
    assert "seed" in err
    assert main(["score", *_run_args(inputs, out, "--seed", "9", "--force")]) == 0


def test_corrupted_weights_fail_cleanly(tmp_path, inputs, capsys):
    shutil.copytree(inputs / "model", tmp_path / "m")
    st = next((tmp_path / "m").glob("*.safetensors"))
    st.write_bytes(st.read_bytes()[:200])
    args = _run_args(inputs, tmp_path / "o")
    args[1] = str(tmp_path / "m")
    assert main(["patch-sweep", *args]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and "safetensors" in err
    assert not (tmp_path / "o" / "sweeps.jsonl").exists()


def test_stage_commands_chain(tmp_path, inputs):
    out = tmp_path / "s"
    for cmd in (["patch-sweep"], ["heatmap", "--pair-id", "1", "--condition", "good_news"], ["flip-test"],
                ["extract-direction"], ["steer"], ["stats", "--grouping", "overall"]):
        assert main([*cmd[:1], *_run_args(inputs, out), *cmd[1:]]) == 0, cmd
    assert (out / "heatmaps" / "heatmap_1_good_news.svg").exists()
    assert (out / "tables" / "scores_overall.tsv").exists()
    assert not (out / "tables" / "scores_by_domain.tsv").exists()


def test_steer_without_direction_fails(tmp_path, inputs, capsys):
    assert main(["steer", *_run_args(inputs, tmp_path / "x")]) == 1
    assert "error:" in capsys.readouterr().err


def test_usage_errors_and_entry_point():
    with pytest.raises(SystemExit) as exc:
        main(["patch-sweep"])
    assert exc.value.code == 2
    done = subprocess.run([sys.executable, "-m", "valence_patching.cli", "--help"], capture_output=True, text=True)
    assert done.returncode == 0 and "patch-sweep" in done.stdout
