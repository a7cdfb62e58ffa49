import json

import pytest

from bingo.cli import _FIELDS, build_parser, main, read_config_file
from bingo.dataio import load_bags, load_checkpoint, load_reports

TINY = ["--epochs", "1", "--batch-size", "16", "--bank-capacity", "64", "--teacher-hidden", "16",
        "--student-hidden", "8", "--proj-hidden", "8", "--embed-dim", "4", "--log-every", "1"]


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.setenv("BINGO_RUN_DIR", str(tmp_path / "runs"))
    monkeypatch.chdir(tmp_path)
    assert main(["gen-data", "--n", "200", "--dim", "6", "--classes", "4", "--out", "data"]) == 0
    assert main(["pretrain", "--data", "data", "--out", "t.ckpt", *TINY]) == 0
    assert main(["embed", "--data", "data", "--ckpt", "t.ckpt", "--out", "e.bin"]) == 0
    return tmp_path


def manifests(root, command):
    return [json.loads(p.read_text()) for p in sorted((root / "runs").glob(f"manifest-{command}-*.json"))]


def test_bag_flag_plumbing(workspace):
    assert main(["bag", "--emb", "e.bin", "--strategy", "knn", "--k", "5", "--out", "bags.tsv"]) == 0
    header = (workspace / "bags.tsv").read_text().splitlines()[0]
    assert "strategy=knn param=5" in header
    assert len(load_bags(workspace / "bags.tsv")) == 160


def test_pipeline_writes_metrics_and_manifests(workspace, capsys):
    main(["bag", "--emb", "e.bin", "--k", "3", "--out", "bags.tsv"])
    assert main(["distill", "--data", "data", "--teacher", "t.ckpt", "--bags", "bags.tsv", "--out", "s.ckpt",
                 *TINY]) == 0
    out = capsys.readouterr().out
    first = out.splitlines()[0]
    assert first.startswith("step=0 lr=") and "loss_intra=" in first and "loss_inter=" in first
    assert (workspace / "runs" / "s.ckpt.metrics").read_text().splitlines()[0] == first
    m = manifests(workspace, "distill")[0]
    assert m["exit_status"] == 0 and m["seed"] == 0
    assert m["config"]["epochs"] == "1" and m["config"]["tau"] == "0.2"
    assert "s.ckpt" in m["outputs"] and m["start"] <= m["end"]


def test_relation_arms_give_comparable_reports(workspace):
    main(["bag", "--emb", "e.bin", "--k", "3", "--out", "bags.tsv"])
    for relation in ("none", "teacher"):
        assert main(["distill", "--data", "data", "--teacher", "t.ckpt", "--bags", "bags.tsv", "--relation",
                     relation, "--out", f"{relation}.ckpt", *TINY]) == 0
        assert main(["eval", "--data", "data", "--ckpt", f"{relation}.ckpt", "--mode", "bagdis", "--bags",
                     "bags.tsv", "--out", f"{relation}.txt"]) == 0
    a, b = load_reports(workspace / "none.txt")[0], load_reports(workspace / "teacher.txt")[0]
    assert a.metric == b.metric == "bagdis" and a.n_train == b.n_train
    assert a.config != b.config


def test_sweep_reports_one_line_per_value(workspace):
    assert main(["sweep", "--data", "data", "--teacher", "t.ckpt", "--param", "k", "--values", "1,5,10,20",
                 "--out-dir", "sw", *TINY]) == 0
    reports = load_reports(workspace / "sw" / "reports.txt")
    assert [r.metric for r in reports] == ["knn@k=1", "knn@k=5", "knn@k=10", "knn@k=20"]


def test_identical_invocations_identical_artifacts(workspace):
    for name in ("a", "b"):
        main(["bag", "--emb", "e.bin", "--k", "3", "--out", f"{name}.tsv"])
        main(["distill", "--data", "data", "--teacher", "t.ckpt", "--bags", f"{name}.tsv", "--out",
              f"{name}.ckpt", *TINY])
    assert (workspace / "a.tsv").read_bytes() == (workspace / "b.tsv").read_bytes()
    assert (workspace / "a.ckpt").read_bytes() == (workspace / "b.ckpt").read_bytes()


def test_config_file_and_flag_precedence(workspace):
    (workspace / "c.cfg").write_text("# tiny run\nepochs = 1\ntau = 0.5\nteacher_hidden = 16\n"
                                     "proj_hidden = 8\nembed_dim = 4\nbatch_size = 16\nbank_capacity = 64\n")
    assert main(["pretrain", "--data", "data", "--out", "c.ckpt", "--config", "c.cfg", "--tau", "0.3"]) == 0
    m = manifests(workspace, "pretrain")[-1]
    assert m["config"]["tau"] == "0.3" and m["config"]["epochs"] == "1"
    assert load_checkpoint(workspace / "c.ckpt").spec.hidden_dims == (16,)


def test_config_file_rejects_unknown_keys(tmp_path):
    (tmp_path / "bad.cfg").write_text("nonsense = 3\n")
    with pytest.raises(Exception):
        read_config_file(tmp_path / "bad.cfg")


def test_exit_codes(workspace, capsys):
    assert main(["distill", "--no-such-flag"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main(["frobnicate"]) == 2
    (workspace / "bad.cfg").write_text("nonsense = 3\n")
    assert main(["pretrain", "--data", "data", "--out", "x.ckpt", "--config", "bad.cfg"]) == 2
    # student width differs from the teacher's embedding size
    assert main(["distill", "--data", "data", "--teacher", "t.ckpt", "--out", "s.ckpt", "--relation", "none"]) == 3
    (workspace / "junk.ckpt").write_bytes(b"not a checkpoint")
    assert main(["eval", "--data", "data", "--ckpt", "junk.ckpt"]) == 3
    assert main(["pretrain", "--data", "data", "--out", "x.ckpt", *TINY, "--base-lr", "1e200"]) == 4
    statuses = sorted(m["exit_status"] for m in manifests(workspace, "distill"))
    assert 2 in statuses and 3 in statuses
    assert manifests(workspace, "pretrain")[-1]["exit_status"] == 4


def test_help_lists_every_config_key(capsys):
    parser = build_parser()
    subs = parser._subparsers._group_actions[0].choices
    for name, sub in subs.items():
        text = sub.format_help()
        for key in _FIELDS:
            if key == "mode":
                continue
            assert f"--{key.replace('_', '-')}" in text, (name, key)
        assert "default: 0.2" in text and "default: 512,512" in text
