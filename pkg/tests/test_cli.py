import json
from pathlib import Path

import pytest
import yaml

from cyclecap.cli import main


def run(*argv):
    return main(list(argv))


TINY_TRAIN = ["--min-freq", "1", "--max-epochs", "2", "--patience", "2",
              "--dropout", "0.0", "--batch-size", "8", "--learning-rate", "2e-3",
              "--proj-dim", "16", "--embed-dim", "16", "--hidden-dim", "16",
              "--attn-dim", "16", "--validate-every", "5"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth-data -> pretrain -> train once per module; commands build on it."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run("synth-data", "--out-dir", str(data), "--seed", "7",
               "--n-images", "8") == 0
    part1 = root / "part1"
    assert run("pretrain", "--manifest", str(data / "manifest.jsonl"),
               "--out-dir", str(part1), "--seed", "3", *TINY_TRAIN) == 0
    part2 = root / "part2"
    assert run("train", "--manifest", str(data / "manifest.jsonl"),
               "--part1", str(part1 / "part1.ckpt"),
               "--out-dir", str(part2), "--seed", "3", "--lambda", "1.0",
               *TINY_TRAIN) == 0
    return root


def test_synth_data_outputs(pipeline):
    data = pipeline / "data"
    assert (data / "manifest.jsonl").is_file()
    assert (data / "alignments.jsonl").is_file()
    assert (data / "manifest.json").is_file()  # run manifest
    assert len(list((data / "features").glob("*.feat"))) == 8


def test_pretrain_outputs(pipeline):
    part1 = pipeline / "part1"
    assert (part1 / "part1.ckpt").is_file()
    assert (part1 / "vocab_en.txt").is_file()
    report = (part1 / "report.jsonl").read_text().splitlines()
    assert json.loads(report[0])["phase"] == "part1"


def test_train_outputs(pipeline):
    part2 = pipeline / "part2"
    assert (part2 / "bundle.ckpt").is_file()
    assert (part2 / "vocab_en.txt").is_file()
    assert (part2 / "vocab_de.txt").is_file()


def test_infer_and_eval(pipeline, tmp_path):
    data = pipeline / "data"
    decoded = tmp_path / "decoded"
    assert run("infer", "--checkpoint", str(pipeline / "part2" / "bundle.ckpt"),
               "--manifest", str(data / "manifest.jsonl"),
               "--out-dir", str(decoded), "--beam-size", "2", "--max-len", "10") == 0
    rows = [json.loads(l) for l in
            (decoded / "captions.jsonl").read_text().splitlines()]
    assert len(rows) == 8
    assert {"image_id", "en", "de", "en_truncated", "de_truncated",
            "fallback"} <= set(rows[0])

    scored = tmp_path / "scored"
    assert run("eval", "--candidates", str(decoded / "captions.jsonl"),
               "--manifest", str(data / "manifest.jsonl"), "--field", "de",
               "--model-name", "cycle-attn", "--out-dir", str(scored)) == 0
    table = (scored / "report.txt").read_text()
    assert "cycle-attn" in table and "CIDEr" in table
    metrics = json.loads((scored / "metrics.json").read_text())
    assert metrics["count"] == 8


def test_infer_threads_match_single_thread(pipeline, tmp_path):
    data = pipeline / "data"
    outs = []
    for threads in ("1", "3"):
        out = tmp_path / f"t{threads}"
        assert run("infer", "--checkpoint",
                   str(pipeline / "part2" / "bundle.ckpt"),
                   "--manifest", str(data / "manifest.jsonl"),
                   "--out-dir", str(out), "--beam-size", "1",
                   "--max-len", "8", "--threads", threads) == 0
        outs.append((out / "captions.jsonl").read_bytes())
    assert outs[0] == outs[1]


def test_attn_export(pipeline, tmp_path):
    data = pipeline / "data"
    out = tmp_path / "attn"
    assert run("attn-export", "--checkpoint",
               str(pipeline / "part2" / "bundle.ckpt"),
               "--manifest", str(data / "manifest.jsonl"),
               "--out-dir", str(out), "--limit", "2",
               "--use-gold-captions") == 0
    pgms = list((out / "attn").glob("*.pgm"))
    dumps = list((out / "attn").glob("*.attn.txt"))
    assert pgms and len(dumps) == 2
    body = dumps[0].read_text().splitlines()
    assert body[0] == "attention-record v1"


def test_captioner_only_inference(pipeline, tmp_path):
    # the single-stage baseline: pretrain on German captions, then infer
    data = pipeline / "data"
    soft = tmp_path / "soft-attn"
    assert run("pretrain", "--manifest", str(data / "manifest.jsonl"),
               "--caption-field", "de", "--out-dir", str(soft), "--seed", "3",
               *TINY_TRAIN) == 0
    decoded = tmp_path / "decoded"
    assert run("infer", "--checkpoint", str(soft / "part1.ckpt"),
               "--manifest", str(data / "manifest.jsonl"),
               "--caption-field", "de", "--out-dir", str(decoded),
               "--beam-size", "1", "--max-len", "8") == 0
    rows = [json.loads(l) for l in
            (decoded / "captions.jsonl").read_text().splitlines()]
    assert rows[0]["en"] == ""


def test_oracle_check(tmp_path, capsys):
    assert run("oracle-check", "--out-dir", str(tmp_path), "--trials", "25") == 0
    out = capsys.readouterr().out
    assert "0.75" in out
    assert (tmp_path / "oracle.txt").is_file()


def test_gradcheck_tiny(tmp_path, capsys):
    assert run("gradcheck", "--out-dir", str(tmp_path), "--dims", "tiny") == 0
    out = capsys.readouterr().out
    assert "worst" in out
    assert "FAILED" not in out


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        run("oracle-check", "--no-such-flag")
    assert exc.value.code == 2
    assert "--trials" in capsys.readouterr().err  # usage lists the valid flags


def test_error_categories(tmp_path):
    missing = tmp_path / "nope.jsonl"
    assert run("pretrain", "--manifest", str(missing),
               "--out-dir", str(tmp_path / "x")) == 5  # io
    assert run("eval", "--candidates", str(missing), "--manifest", str(missing),
               "--field", "fr", "--out-dir", str(tmp_path / "y")) == 2  # config


def test_config_file_feeds_defaults_and_flags_override(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump({"n-images": 3, "seed": 9}), encoding="utf-8")
    out = tmp_path / "data"
    assert run("synth-data", "--config", str(cfg), "--out-dir", str(out),
               "--seed", "11") == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["settings"]["n_images"] == 3   # from config
    assert manifest["settings"]["seed"] == 11      # flag wins


def compare_trees(a: Path, b: Path):
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        if rel.name == "manifest.json":
            continue  # records settings, not run outputs
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_from_manifest_reruns_byte_identically(pipeline, tmp_path):
    part2 = pipeline / "part2"
    rerun = tmp_path / "part2-rerun"
    assert run("train", "--from-manifest", str(part2 / "manifest.json"),
               "--out-dir", str(rerun)) == 0
    compare_trees(part2, rerun)
