import json

import numpy as np
import pytest

from asgl import cli, fusion, pose, trainer
from asgl import evaluate as ev
from asgl.errors import ConfigError

TINY_CONFIG = """\
# tiny model for fast runs
P = 2
K = 2
epochs = 1
refine_dims = 4, 8, 16
gat_dims = [8, 8]
sta_channels = 8,16
heads = 2
embed_dim = 8
appearance_hidden = 8
clip_len = 4
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY_CONFIG)
    assert run("synth", "--out", root / "data", "--identities", 2, "--tracklets", 2, "--heldout", 4,
               "--frames", 16, "--seed", 3) == 0
    d = root / "data"
    assert run("preprocess", "--keypoints", d / "keypoints.jsonl", "--manifest", d / "manifest.jsonl",
               "--appearance", d / "appearance.jsonl", "--out", root / "store") == 0
    assert run("train", "--data", root / "store", "--config", root / "tiny.cfg", "--seed", 7,
               "--out", root / "run") == 0
    return root


# ---------------------------------------------------------------- config parsing

def test_parse_config_types():
    cfg = cli.parse_config_text(TINY_CONFIG + "use_gait = false\nlr = 1e-3\npadding = circular\n")
    assert cfg["refine_dims"] == (4, 8, 16) and cfg["gat_dims"] == (8, 8)
    assert cfg["use_gait"] is False and cfg["lr"] == 1e-3 and cfg["P"] == 2 and cfg["padding"] == "circular"


@pytest.mark.parametrize("text,msg", [
    ("bogus = 1", "unknown key 'bogus'"),
    ("P = 2\nP = 3", "given twice"),
    ("P 2", "key = value"),
    ("P = two", "bad value"),
    ("use_shape = maybe", "bad value"),
])
def test_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        cli.parse_config_text(text)


def test_flag_precedence(tmp_path):
    (tmp_path / "c.cfg").write_text("epochs = 5\nlr = 0.1\nseed = 1\n")
    args = cli.build_parser().parse_args(["train", "--out", "x", "--config", str(tmp_path / "c.cfg"),
                                          "--set", "lr=0.2", "--set", "seed=2", "--seed", "3"])
    cfg = cli.resolve_config(args, base={"epochs": 9, "heads": 1})
    assert (cfg.epochs, cfg.lr, cfg.seed, cfg.heads) == (5, 0.2, 3, 1)


# ---------------------------------------------------------------- commands

def test_unknown_config_key_exit_code(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("learning_rate = 1\n")
    code = run("train", "--keypoints", "k", "--manifest", "m", "--config", tmp_path / "bad.cfg", "--out", tmp_path)
    assert code == 1
    assert "error[E_CONFIG]" in capsys.readouterr().err


def test_malformed_keypoints_report_line(tmp_path, capsys):
    (tmp_path / "kp.jsonl").write_text("\n{oops\n")
    (tmp_path / "m.jsonl").write_text("")
    assert run("preprocess", "--keypoints", tmp_path / "kp.jsonl", "--manifest", tmp_path / "m.jsonl",
               "--out", tmp_path / "s") == 1
    err = capsys.readouterr().err
    assert "error[E_INGEST]" in err and "line 2" in err


def test_empty_manifest_gives_empty_store(tmp_path, caplog):
    (tmp_path / "kp.jsonl").write_text("")
    (tmp_path / "m.jsonl").write_text("")
    assert run("preprocess", "--keypoints", tmp_path / "kp.jsonl", "--manifest", tmp_path / "m.jsonl",
               "--out", tmp_path / "s") == 0
    assert (tmp_path / "s" / "index.jsonl").read_text() == ""
    assert "no tracklets" in caplog.text


def test_one_tracklet_one_entry(tmp_path):
    assert run("synth", "--out", tmp_path / "d", "--identities", 1, "--tracklets", 1, "--heldout", 0) == 0
    d = tmp_path / "d"
    assert run("preprocess", "--keypoints", d / "keypoints.jsonl", "--manifest", d / "manifest.jsonl",
               "--out", tmp_path / "s") == 0
    assert len((tmp_path / "s" / "index.jsonl").read_text().splitlines()) == 1


def test_preprocess_twice_is_byte_identical(workspace, tmp_path):
    d = workspace / "data"
    assert run("preprocess", "--keypoints", d / "keypoints.jsonl", "--manifest", d / "manifest.jsonl",
               "--appearance", d / "appearance.jsonl", "--out", tmp_path / "again") == 0
    for f in (workspace / "store").rglob("*"):
        if f.is_file() and f.name != "run_config.json":
            assert f.read_bytes() == (tmp_path / "again" / f.relative_to(workspace / "store")).read_bytes()


def test_train_writes_checkpoint_log_and_provenance(workspace):
    run_dir = workspace / "run"
    assert (run_dir / "checkpoint.bin").stat().st_size > 0
    assert len((run_dir / "loss.log").read_text().splitlines()) == 1
    prov = json.loads((run_dir / "run_config.json").read_text())
    assert prov["command"] == "train" and prov["seed"] == 7 and prov["config"]["refine_dims"] == [4, 8, 16]


def test_same_seed_same_loss_log(workspace, tmp_path):
    assert run("train", "--data", workspace / "store", "--config", workspace / "tiny.cfg", "--seed", 7,
               "--out", tmp_path / "r2") == 0
    assert (tmp_path / "r2" / "loss.log").read_bytes() == (workspace / "run" / "loss.log").read_bytes()


def test_lambda2_zero_is_classification_only(workspace, tmp_path):
    assert run("train", "--data", workspace / "store", "--config", workspace / "tiny.cfg", "--lambda2", 0,
               "--lambda1", 1, "--set", "epochs=1", "--out", tmp_path / "r") == 0
    logged = float((tmp_path / "r" / "loss.log").read_text().split("loss=")[1])
    # recompute the first step's loss as pure cross-entropy on the same batch
    cfg = cli.resolve_config(cli.build_parser().parse_args(
        ["train", "--out", "x", "--config", str(workspace / "tiny.cfg"), "--lambda2", "0", "--lambda1", "1"]))
    splits = {s: [] for s in pose.SPLITS}
    for tr, s in pose.read_store(workspace / "store"):
        splits[s].append(tr)
    seen = []

    def capture(model, batch, loss_cfg):
        out = model.forward(batch.clips, batch.appearance)
        ce = fusion.cross_entropy_loss(out["logits"], batch.labels)
        seen.append(float(ce.data))
        return orig(model, batch, loss_cfg)

    orig = trainer.training_loss
    trainer.training_loss = capture
    try:
        res = trainer.train(cfg, splits["train"])
    finally:
        trainer.training_loss = orig
    assert res.epoch_losses[0] == logged
    assert res.step_losses == pytest.approx(seen, abs=0, rel=1e-12)


def test_eval_all_protocols(workspace, capsys):
    assert run("eval", "--checkpoint", workspace / "run" / "checkpoint.bin", "--data", workspace / "store",
               "--protocol", "all", "--out", workspace / "eval") == 0
    rep = json.loads((workspace / "eval" / "report.json").read_text())
    assert [r["protocol"] for r in rep] == ["cc", "standard", "sc"]
    for r in rep:
        assert set(r) == {"protocol", "rank1", "rank5", "rank10", "mAP", "num_queries"}
        assert (workspace / "eval" / f"cmc_{r['protocol']}.csv").exists()
    assert json.loads((workspace / "eval" / "run_config.json").read_text())["protocol"] == "all"


def test_eval_missing_checkpoint(workspace, capsys):
    assert run("eval", "--checkpoint", workspace / "nope.bin", "--data", workspace / "store",
               "--out", workspace / "e2") == 1
    assert "error[E_FILE]" in capsys.readouterr().err


def test_sc_with_duplicate_gallery_is_perfect(workspace, tmp_path):
    # each query has an exact copy in the gallery with the same identity and clothing
    d = workspace / "data"
    seqs = pose.read_keypoints(d / "keypoints.jsonl")
    manifest = pose.read_manifest(d / "manifest.jsonl")
    app = pose.read_appearance(d / "appearance.jsonl")
    queries = [t for t, s in manifest.items() if s == "query"]
    out_seqs, out_man, out_app = [], {}, {}
    for t in queries:
        for suffix, split in (("", "query"), ("_dup", "gallery")):
            s = seqs[t]
            out_seqs.append(pose.RawPoseSequence(t + suffix, s.person_id, s.clothing_id, "camX" + suffix,
                                                 s.frames, s.frame_size))
            out_man[t + suffix] = split
            out_app[t + suffix] = app[t]
    pose.write_keypoints(tmp_path / "kp.jsonl", out_seqs)
    pose.write_manifest(tmp_path / "m.jsonl", out_man)
    pose.write_appearance(tmp_path / "a.jsonl", out_app)
    assert run("eval", "--checkpoint", workspace / "run" / "checkpoint.bin", "--keypoints", tmp_path / "kp.jsonl",
               "--manifest", tmp_path / "m.jsonl", "--appearance", tmp_path / "a.jsonl", "--protocol", "sc",
               "--out", tmp_path / "e") == 0
    assert json.loads((tmp_path / "e" / "report.json").read_text())["rank1"] == 1.0


def test_report_matches_hand_scored_fixture(tmp_path):
    # cosine orders: q1 -> g1 g2 g3 g4; q2 -> g4 g3 g2 g1; q3 -> g3 g4 g2 g1 (g3/g4 tie, id order)
    q = [dict(person_id=p, clothing_id="a", camera_id="c", tracklet_id=f"q{i}") for i, p in enumerate("xyz", 1)]
    g = [dict(person_id=p, clothing_id="b", camera_id="c", tracklet_id=f"g{i}") for i, p in enumerate("xyzz", 1)]
    qe = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    ge = np.array([[1.0, 0.1], [1.0, 0.5], [1.0, 0.9], [0.9, 1.0]])

    r = ev.cmc_map(ev.cosine_distance(qe, ge), *ev.protocol_filter(q, g, "cc"),
                   gallery_ids=[x["tracklet_id"] for x in g], protocol="cc")
    ev.write_report(tmp_path / "r.json", [r])
    rep = json.loads((tmp_path / "r.json").read_text())
    # q1 hits at rank 1 (AP 1); q2's positive g2 is third (AP 1/3); q3's positives g3, g4 lead (AP 1)
    assert rep["rank1"] == pytest.approx(2 / 3, abs=1e-15)
    assert rep["mAP"] == pytest.approx((1 + 1 / 3 + 1) / 3, abs=1e-15)
    assert rep["num_queries"] == 3


def test_embed_writes_ids(workspace):
    assert run("embed", "--checkpoint", workspace / "run" / "checkpoint.bin", "--data", workspace / "store",
               "--split", "query", "--out", workspace / "emb") == 0
    z = np.load(workspace / "emb" / "embeddings.npz")
    assert z["embeddings"].shape == (len(z["ids"]), 8)
    assert all(i.endswith(("t02", "t04")) for i in z["ids"])


def test_check_invariants_only(capsys):
    assert run("check", "--skip-gradients") == 0
    assert "checks passed" in capsys.readouterr().out
