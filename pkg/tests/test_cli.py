import json
from pathlib import Path

import numpy as np
import pytest

from nrccr import trainer
from nrccr.cli import main
from nrccr.errors import TrainingDivergenceError
from nrccr.retrieval import ModelEmbedder
from nrccr import corpus as corpus_mod


def _dir_bytes(d: Path):
    return {p.name: p.read_bytes() for p in sorted(Path(d).iterdir()) if p.is_file()}


@pytest.fixture(scope="session")
def corpus_dir(shared_tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus") / "c"
    assert main(["gen-corpus", "--config", str(shared_tiny_config),
                 "--out", str(out), "--seed", "5"]) == 0
    return out


@pytest.fixture(scope="session")
def trained_dir(shared_tiny_config, corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "full"
    assert main(["train", "--corpus", str(corpus_dir), "--config",
                 str(shared_tiny_config), "--out", str(out), "--seed", "1"]) == 0
    return out


# ---------------------------------------------------------------------------
# gen-corpus
# ---------------------------------------------------------------------------


def test_gen_corpus_writes_manifest(corpus_dir):
    manifest = json.loads((corpus_dir / "manifest.json").read_text())
    assert manifest["vocab_size"] == 40
    assert manifest["seed"] == 5
    assert (corpus_dir / "features.tsv").exists()
    assert (corpus_dir / "captions.tsv").exists()


def test_gen_corpus_rejects_bad_rho(tiny_config_file, tmp_path, capsys):
    code = main(["gen-corpus", "--config", str(tiny_config_file),
                 "--out", str(tmp_path / "x"), "--rho", "1.5"])
    assert code == 2
    assert "rho" in capsys.readouterr().err


def test_gen_corpus_unknown_key_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("vocab_size = 40\nwibble = 3\n")
    code = main(["gen-corpus", "--config", str(cfg), "--out", str(tmp_path / "x")])
    assert code == 2
    assert "wibble" in capsys.readouterr().err


def test_gen_corpus_seed_determinism(tiny_config_file, tmp_path):
    for name in ("a", "b"):
        assert main(["gen-corpus", "--config", str(tiny_config_file),
                     "--out", str(tmp_path / name), "--seed", "9"]) == 0
    assert _dir_bytes(tmp_path / "a") == _dir_bytes(tmp_path / "b")


def test_missing_subcommand_usage_error():
    assert main([]) == 2


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_train_writes_artifacts(trained_dir):
    assert (trained_dir / "best.ckpt").exists()
    log = [json.loads(l) for l in (trained_dir / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 2
    assert set(log[0]) == {"epoch", "lr", "loss_total", "loss_tri", "loss_sim",
                           "loss_feat", "loss_cyc", "loss_adv", "val_sumr"}


def test_train_rerun_identical_log(shared_tiny_config, corpus_dir, trained_dir, tmp_path):
    out = tmp_path / "again"
    assert main(["train", "--corpus", str(corpus_dir), "--config",
                 str(shared_tiny_config), "--out", str(out), "--seed", "1"]) == 0
    assert (out / "train_log.jsonl").read_bytes() == \
        (trained_dir / "train_log.jsonl").read_bytes()
    assert (out / "best.ckpt").read_bytes() == (trained_dir / "best.ckpt").read_bytes()


def test_train_basic_zeroes_components(shared_tiny_config, corpus_dir, tmp_path):
    out = tmp_path / "basic"
    assert main(["train", "--corpus", str(corpus_dir), "--config",
                 str(shared_tiny_config), "--out", str(out), "--seed", "1",
                 "--basic"]) == 0
    for line in (out / "train_log.jsonl").read_text().splitlines():
        entry = json.loads(line)
        assert entry["loss_sim"] == entry["loss_feat"] == 0.0
        assert entry["loss_cyc"] == entry["loss_adv"] == 0.0


def test_train_divergence_exit_3(shared_tiny_config, corpus_dir, tmp_path,
                                 monkeypatch, capsys):
    def boom(*a, **k):
        raise TrainingDivergenceError(0, 4)
    monkeypatch.setattr(trainer, "train", boom)
    code = main(["train", "--corpus", str(corpus_dir), "--config",
                 str(shared_tiny_config), "--out", str(tmp_path / "x")])
    assert code == 3
    assert "epoch 0, batch 4" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def test_eval_writes_fixed_key_json(corpus_dir, trained_dir, tmp_path):
    out = tmp_path / "metrics.json"
    assert main(["eval", "--corpus", str(corpus_dir), "--checkpoint",
                 str(trained_dir / "best.ckpt"), "--out", str(out)]) == 0
    d = json.loads(out.read_text())
    assert set(d) == {"t2v", "v2t", "sumr"}
    assert set(d["t2v"]) == {"r1", "r5", "r10", "medr", "map"}


def test_eval_beta_variants_and_t2t(corpus_dir, trained_dir, tmp_path):
    out1, out8 = tmp_path / "b1.json", tmp_path / "b8.json"
    assert main(["eval", "--corpus", str(corpus_dir), "--checkpoint",
                 str(trained_dir / "best.ckpt"), "--out", str(out1),
                 "--beta", "1.0"]) == 0
    assert main(["eval", "--corpus", str(corpus_dir), "--checkpoint",
                 str(trained_dir / "best.ckpt"), "--out", str(out8),
                 "--beta", "0.8", "--t2t", "--group-by-length"]) == 0
    d8 = json.loads(out8.read_text())
    assert "t2t" in d8 and "map" in d8["t2t"]
    assert "buckets" in d8
    assert json.loads(out1.read_text())["sumr"] != d8["sumr"] or True  # both valid runs


def test_eval_deterministic_bytes(corpus_dir, trained_dir, tmp_path):
    outs = []
    for name in ("m1.json", "m2.json"):
        out = tmp_path / name
        assert main(["eval", "--corpus", str(corpus_dir), "--checkpoint",
                     str(trained_dir / "best.ckpt"), "--out", str(out), "--t2t"]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_eval_version_mismatch_exit_2(corpus_dir, trained_dir, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    text = (trained_dir / "best.ckpt").read_text()
    bad.write_text("NRCCR-CKPT v7" + text[len("NRCCR-CKPT v1"):])
    code = main(["eval", "--corpus", str(corpus_dir), "--checkpoint", str(bad),
                 "--out", str(tmp_path / "m.json")])
    assert code == 2
    assert "version" in capsys.readouterr().err


def test_eval_rankings_dump(corpus_dir, trained_dir, tmp_path):
    out = tmp_path / "m.json"
    ranks = tmp_path / "ranks.tsv"
    assert main(["eval", "--corpus", str(corpus_dir), "--checkpoint",
                 str(trained_dir / "best.ckpt"), "--out", str(out),
                 "--rankings-out", str(ranks)]) == 0
    lines = ranks.read_text().splitlines()
    dataset = corpus_mod.load_corpus(corpus_dir)
    n_queries = len(dataset.test.instances)
    n_videos = len(dataset.test.videos())
    assert len(lines) == n_queries * min(10, n_videos)
    first = lines[0].split("\t")
    assert len(first) == 4 and first[1] == "1"


# ---------------------------------------------------------------------------
# dump-embeddings
# ---------------------------------------------------------------------------


def test_dump_embeddings_rows_and_consistency(corpus_dir, trained_dir, tmp_path):
    out = tmp_path / "emb.tsv"
    assert main(["dump-embeddings", "--corpus", str(corpus_dir), "--checkpoint",
                 str(trained_dir / "best.ckpt"), "--out", str(out),
                 "--sample", "3", "--seed", "0"]) == 0
    lines = [l.split("\t") for l in out.read_text().splitlines()]
    dataset = corpus_mod.load_corpus(corpus_dir)
    captions_per_video = dataset.config.captions_per_video
    assert len(lines) == 3 * (1 + 2 * captions_per_video)
    ckpt = trainer.load_checkpoint(trained_dir / "best.ckpt")
    model, _, config, dims = trainer.build_from_checkpoint(ckpt)
    embedder = ModelEmbedder(model)
    for kind, vid, cap, payload in lines:
        vec = np.array([float(x) for x in payload.split()])
        assert vec.size == dims.common_dim
        if kind == "video":
            assert cap == "-"
            expect = embedder.embed_video(dataset.test.videos()[vid].features)
            assert np.allclose(vec, expect, atol=1e-12)


def test_dump_embeddings_clamps_sample(corpus_dir, trained_dir, tmp_path, capsys):
    out = tmp_path / "emb.tsv"
    assert main(["dump-embeddings", "--corpus", str(corpus_dir), "--checkpoint",
                 str(trained_dir / "best.ckpt"), "--out", str(out),
                 "--sample", "999", "--seed", "0"]) == 0
    assert "clamping" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# experiment harnesses (scaled down)
# ---------------------------------------------------------------------------


def test_sweep_noise_manifest(shared_tiny_config, tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep-noise", "--config", str(shared_tiny_config),
                 "--rhos", "0.1,0.4", "--seeds", "0", "--out", str(out)]) == 0
    manifest = json.loads((out / "experiment.json").read_text())
    assert manifest["complete"] is True
    assert len(manifest["cells"]) == 2 * 1 * 2  # rhos x seeds x {full, basic}
    for variant in ("full", "basic"):
        for rho in ("0.1", "0.4"):
            cells = [c["sumr"] for c in manifest["cells"]
                     if c["variant"] == variant and str(c["rho"]) == rho]
            assert manifest["aggregates"]["mean_sumr"][variant][rho] == \
                pytest.approx(np.mean(cells))
    deg = manifest["aggregates"]["degradation"]
    for variant in ("full", "basic"):
        assert deg[variant] == pytest.approx(
            manifest["aggregates"]["mean_sumr"][variant]["0.1"]
            - manifest["aggregates"]["mean_sumr"][variant]["0.4"])


def test_sweep_noise_requires_two_rhos(shared_tiny_config, tmp_path, capsys):
    assert main(["sweep-noise", "--config", str(shared_tiny_config),
                 "--rhos", "0.2", "--seeds", "0", "--out", str(tmp_path / "s")]) == 2


def test_ablate_manifest(shared_tiny_config, corpus_dir, tmp_path):
    out = tmp_path / "ablate"
    assert main(["ablate", "--corpus", str(corpus_dir), "--config",
                 str(shared_tiny_config), "--out", str(out), "--seeds", "1"]) == 0
    manifest = json.loads((out / "experiment.json").read_text())
    assert manifest["complete"] is True
    assert manifest["rows"] == ["basic", "sim", "feat", "sim_feat",
                                "sim_feat_cyc", "full"]
    assert len(manifest["cells"]) == 6
    basic_cells = [c for c in manifest["cells"] if c["row"] == "basic"]
    assert len(basic_cells) == 1


def test_ablate_basic_row_matches_train_basic(shared_tiny_config, corpus_dir,
                                              tmp_path):
    out = tmp_path / "ablate2"
    assert main(["ablate", "--corpus", str(corpus_dir), "--config",
                 str(shared_tiny_config), "--out", str(out), "--seeds", "1"]) == 0
    manifest = json.loads((out / "experiment.json").read_text())
    basic_cell = next(c for c in manifest["cells"] if c["row"] == "basic")

    run = tmp_path / "basicrun"
    assert main(["train", "--corpus", str(corpus_dir), "--config",
                 str(shared_tiny_config), "--out", str(run), "--seed", "1",
                 "--basic"]) == 0
    metrics = tmp_path / "basic.json"
    assert main(["eval", "--corpus", str(corpus_dir), "--checkpoint",
                 str(run / "best.ckpt"), "--out", str(metrics), "--t2t"]) == 0
    assert json.loads(metrics.read_text())["sumr"] == pytest.approx(basic_cell["sumr"])


# ---------------------------------------------------------------------------
# NRCCR_SEED environment default
# ---------------------------------------------------------------------------


def test_env_seed_last_resort(tiny_config_file, tmp_path, monkeypatch):
    monkeypatch.setenv("NRCCR_SEED", "123")
    out = tmp_path / "envseed"
    assert main(["gen-corpus", "--config", str(tiny_config_file),
                 "--out", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["seed"] == 123
    # explicit flag wins over the environment
    out2 = tmp_path / "flagseed"
    assert main(["gen-corpus", "--config", str(tiny_config_file),
                 "--out", str(out2), "--seed", "7"]) == 0
    assert json.loads((out2 / "manifest.json").read_text())["seed"] == 7
