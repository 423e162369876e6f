import csv
import json

import numpy as np
import pytest

from placeid.cli import KITTI_SEQUENCE_SIZES, main
from placeid.dataset import Split, load_dataset, write_descriptors
from placeid.docid import build_trie
from placeid.evaluation.metrics import RetrievalRecord, read_records, write_records
from placeid.gendec.beam import sequence_log_prob
from placeid.gendec.model import load_checkpoint


def cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, json.loads(out) if code == 0 else json.loads(err)


def small(out, n=60, dim=8, extra=()):
    return ["--out", out, "--set", f"dataset.n_scenes={n}", "--set", f"dataset.descriptor_dim={dim}", *extra]


@pytest.fixture
def encoded(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli(capsys, "prepare", *small(out, 120, 8))[0] == 0
    assert cli(capsys, "encode", *small(out))[0] == 0
    return out


# --- prepare ----------------------------------------------------------------------

def test_prepare_byte_stable(tmp_path, capsys):
    blobs = []
    for name in ("a", "b"):
        code, res = cli(capsys, "prepare", "--out", tmp_path / name, "--seed", 3)
        assert code == 0 and res["scenes"] == 500
        files = sorted((tmp_path / name / "dataset").iterdir())
        assert [f.name for f in files] == ["descriptors.dsc", "poses.csv", "splits.csv"]
        blobs.append([f.read_bytes() for f in files])
    assert blobs[0] == blobs[1]


def test_prepare_missing_pose_file_named(tmp_path, capsys):
    missing = tmp_path / "nope.txt"
    write_descriptors(tmp_path / "d.dsc", np.zeros((1, 4)))
    code, err = cli(capsys, "prepare", "--out", tmp_path / "run", "--set", "dataset.source=files",
                    "--set", f'dataset.poses=["{missing}"]', "--set", f'dataset.descriptors=["{tmp_path / "d.dsc"}"]')
    assert code == 1
    assert str(missing) in err["message"]


def test_prepare_six_sequence_manifest(tmp_path, capsys):
    code, res = cli(capsys, "prepare", "--out", tmp_path, "--set", f"dataset.sequences={KITTI_SEQUENCE_SIZES}",
                    "--set", "dataset.descriptor_dim=4")
    assert code == 0
    with open(tmp_path / "dataset" / "splits.csv") as fh:
        rows = list(csv.reader(fh))[1:]
    assert len(rows) == res["scenes"] == 18236


def test_prepare_from_files(tmp_path, capsys):
    poses = tmp_path / "p.txt"
    poses.write_text("".join(f"1 0 0 {i} 0 1 0 0 0 0 1 0\n" for i in range(12)))
    write_descriptors(tmp_path / "d.dsc", np.eye(12, 5) + 1)
    code, res = cli(capsys, "prepare", "--out", tmp_path / "run", "--set", "dataset.source=files",
                    "--set", f'dataset.poses=["{poses}"]', "--set", f'dataset.descriptors=["{tmp_path / "d.dsc"}"]')
    assert code == 0
    assert res["splits"] == {"TRAIN": 9, "VAL": 1, "EVAL": 2}  # local indices 0 and 10 are EVAL


# --- encode -----------------------------------------------------------------------

def test_encode_gps_toy_coordinates(tmp_path, capsys):
    poses = tmp_path / "p.csv"
    poses.write_text("x,y,z,t\n11.11,22.22,0,0\n0,0,0,1\n")
    write_descriptors(tmp_path / "d.dsc", np.ones((2, 3)))
    base = ["--out", tmp_path / "run", "--set", "dataset.source=files", "--set", f'dataset.poses=["{poses}"]',
            "--set", f'dataset.descriptors=["{tmp_path / "d.dsc"}"]', "--set", "dataset.pose_format=XYZT_CSV"]
    assert cli(capsys, "prepare", *base)[0] == 0
    code, res = cli(capsys, "encode", *base, "--strategy", "GPS")
    assert code == 0 and res["docid_lengths"] == [8]
    assert "12121212" in (tmp_path / "run" / "docids.csv").read_text()


def test_encode_label_100(tmp_path, capsys):
    out = tmp_path / "run"
    cli(capsys, "prepare", *small(out, 100))
    code, res = cli(capsys, "encode", *small(out, 100), "--strategy", "LABEL")
    assert code == 0 and res["docid_lengths"] == [2]
    rows = list(csv.reader(open(out / "docids.csv")))[1:]
    assert rows[0][1] == "00" and rows[-1][1] == "99"


def test_encode_hilbert_width_and_report(encoded):
    report = json.loads((encoded / "encode_report.json").read_text())
    assert report["docid_lengths"] == [11] and report["collisions"] == 0
    rows = list(csv.reader(open(encoded / "docids.csv")))[1:]
    assert report["trie_nodes"] == build_trie([r[1] for r in rows]).node_count


def test_encode_overflow_cites_scene(tmp_path, capsys):
    poses = tmp_path / "p.csv"
    poses.write_text("x,y,z,t\n0,0,0,0\n5000,0,0,1\n")
    write_descriptors(tmp_path / "d.dsc", np.ones((2, 3)))
    base = ["--out", tmp_path / "run", "--set", "dataset.source=files", "--set", f'dataset.poses=["{poses}"]',
            "--set", f'dataset.descriptors=["{tmp_path / "d.dsc"}"]', "--set", "dataset.pose_format=XYZT_CSV"]
    cli(capsys, "prepare", *base)
    code, err = cli(capsys, "encode", *base)
    assert code == 1 and "scene 1" in err["message"]


# --- train / retrieve / eval ---------------------------------------------------------

def test_train_zero_epochs(encoded, capsys):
    code, res = cli(capsys, "train", *small(encoded), "--epochs", 0)
    assert code == 0 and res["best_epoch"] == 0
    lines = (encoded / "train_log.csv").read_text().splitlines()
    assert lines == ["epoch,train_loss,val_hits_at_1"]


def test_train_deterministic(encoded, capsys):
    extra = ("--set", "train.embed_dim=8", "--set", "train.width=16")
    cli(capsys, "train", *small(encoded, extra=extra), "--epochs", 2)
    first = (encoded / "decoder.ckpt").read_bytes(), (encoded / "train_log.csv").read_text()
    cli(capsys, "train", *small(encoded, extra=extra), "--epochs", 2)
    assert first == ((encoded / "decoder.ckpt").read_bytes(), (encoded / "train_log.csv").read_text())
    assert (encoded / "train_curve.png").stat().st_size > 0


def test_retrieve_before_train_errors(encoded, capsys):
    code, err = cli(capsys, "retrieve", *small(encoded), "--method", "generative")
    assert code == 1 and "checkpoint" in err["message"]


def test_pipeline_generative_matches_exhaustive(encoded, capsys):
    extra = ("--set", "train.embed_dim=8", "--set", "train.width=16", "--set", "retrieval.beam_width=200",
             "--set", "retrieval.top_k=200", "--set", "eval.dt=2")  # 120 scenes span only 12 s
    cli(capsys, "train", *small(encoded, extra=extra), "--epochs", 1)
    code, res = cli(capsys, "retrieve", *small(encoded, extra=extra))
    assert code == 0
    ds = load_dataset(encoded / "dataset")
    params, _ = load_checkpoint(encoded / "decoder.ckpt")
    docids = [r[1] for r in list(csv.reader(open(encoded / "docids.csv")))[1:]]
    records = read_records(res["records"])
    assert [r.query_index for r in records] == ds.indices(Split.EVAL).tolist()
    train = ds.indices(Split.TRAIN)
    for r in records[:3]:
        q = r.query_index
        allowed = [int(s) for s in train if abs(ds.t[s] - ds.t[q]) >= 2]
        assert r.candidates
        want = sorted(((s, sequence_log_prob(params, ds.descriptors[q], docids[s])) for s in allowed),
                      key=lambda t: (-t[1], docids[t[0]]))
        assert [s for s, _ in r.candidates] == [s for s, _ in want]
        np.testing.assert_allclose([v for _, v in r.candidates], [v for _, v in want], atol=1e-9)
        assert q not in [s for s, _ in r.candidates]


@pytest.mark.parametrize("method", ["exact", "lsh"])
def test_descriptor_baselines_and_eval(encoded, capsys, method):
    code, res = cli(capsys, "retrieve", *small(encoded), "--method", method)
    assert code == 0
    for r in read_records(res["records"]):
        assert r.query_index not in [s for s, _ in r.candidates]
    code, summary = cli(capsys, "eval", *small(encoded))
    assert code == 0 and method in summary
    assert (encoded / "eval_report.csv").read_text().startswith("method,metric,value")
    assert (encoded / "f1_curve.png").exists()


def test_eval_rejects_mismatched_records(encoded, capsys):
    ds = load_dataset(encoded / "dataset")
    q = ds.indices(Split.EVAL)
    bad = encoded / "records_bad.jsonl"
    write_records(bad, [RetrievalRecord(int(i), [(0, -1.0)]) for i in q[:-1]])
    code, err = cli(capsys, "eval", *small(encoded), "--records", bad)
    assert code == 1 and "EVAL" in err["message"]


def test_eval_without_records(encoded, capsys):
    code, err = cli(capsys, "eval", *small(encoded))
    assert code == 1 and "retrieve" in err["message"]


# --- bench / config ------------------------------------------------------------------

def test_bench_small(tmp_path, capsys):
    code, res = cli(capsys, "bench", "--out", tmp_path, "--set", "bench.sizes=[200,400,800,1600]",
                    "--set", "bench.repeats=3", "--set", "bench.warmup=1", "--set", "bench.descriptor_dim=16",
                    "--set", "train.embed_dim=8", "--set", "train.width=16", "--set", 'bench.methods=["exact","generative"]')
    assert code == 0 and "generative" in res["spread"]
    assert (tmp_path / "timing_report.json").exists() and (tmp_path / "timing.png").exists()


def test_bench_single_size_is_error(tmp_path, capsys):
    code, err = cli(capsys, "bench", "--out", tmp_path, "--set", "bench.sizes=[1000]")
    assert code == 1 and err["error"] == "CliError"


def test_unknown_config_key(tmp_path, capsys):
    code, err = cli(capsys, "prepare", "--out", tmp_path, "--set", "dataset.colour=red")
    assert code == 1 and "dataset.colour" in err["message"]


def test_config_file_and_flag_override(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 1, "dataset": {"n_scenes": 30, "descriptor_dim": 4}}))
    code, res = cli(capsys, "prepare", "--config", cfg, "--out", tmp_path / "run", "--set", "dataset.n_scenes=40")
    assert code == 0 and res["scenes"] == 40


def test_missing_config_file(tmp_path, capsys):
    code, err = cli(capsys, "prepare", "--config", tmp_path / "none.json")
    assert code == 1 and "none.json" in err["message"]
