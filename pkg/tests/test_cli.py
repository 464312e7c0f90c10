import json

import numpy as np
import pytest

from nemf.cli import main, read_config
from nemf.cost_embed import embed
from nemf.data import PairAnnotation, generate_synthetic, prepare_pair, write_dataset
from nemf.field import MatchingField, load_model
from nemf.inference import FlowField, infer_exhaustive

TINY = ["--hidden", "16", "--octaves", "3", "--samples", "6", "--lr", "1e-3", "--dtype", "float64"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    assert run("train", "--synthetic", 2, "--steps", 3, "--out", out, "-q", *TINY) == 0
    return out / "final.nmfw"


def infer(tmp_path, name, checkpoint, *extra):
    out = tmp_path / name
    code = run("infer", "--checkpoint", checkpoint, "--synthetic", 1, "--data-seed", 7, "--out", out,
               "-q", *extra)
    return code, out


class TestConfig:
    def test_no_data_is_usage_error(self, tmp_path):
        assert run("train", "--out", tmp_path) == 2

    def test_unknown_keys(self, tmp_path):
        (tmp_path / "a.cfg").write_text("steps=2\nbogus=1\n")
        assert run("train", "--synthetic", 1, "--config", tmp_path / "a.cfg", "--out", tmp_path) == 2
        assert run("train", "--synthetic", 1, "--set", "nope=3", "--out", tmp_path) == 2
        assert run("train", "--synthetic", 1, "--set", "bidirectional=maybe", "--out", tmp_path) == 2
        assert run("train", "--synthetic", 1, "--bogus-flag", "--out", tmp_path) == 2

    def test_invalid_value(self, tmp_path):
        assert run("train", "--synthetic", 1, "--samples", 1, "--out", tmp_path, "-q") == 2
        assert run("train", "--synthetic", 1, "--steps", "many", "--out", tmp_path) == 2

    def test_precedence(self, tmp_path):
        (tmp_path / "a.cfg").write_text("# comment\nsteps=2\nhidden=8\noctaves=2\nsamples=4\ntau=0.5\n")
        argv = ["train", "--synthetic", 1, "--config", tmp_path / "a.cfg", "--set", "tau=0.25", "-q"]
        assert run(*argv, "--out", tmp_path / "a") == 0
        eff = {k: v for k, v, _ in read_config(tmp_path / "a" / "effective_config.txt")}
        assert (eff["steps"], eff["tau"], eff["hidden"]) == ("2", "0.25", "8")
        assert run(*argv, "--tau", 0.125, "--out", tmp_path / "b") == 0
        eff = {k: v for k, v, _ in read_config(tmp_path / "b" / "effective_config.txt")}
        assert eff["tau"] == "0.125"

    def test_seed_fallback(self, tmp_path, monkeypatch):
        base = ["train", "--synthetic", 1, "--steps", 0, "-q", *TINY]
        monkeypatch.setenv("NEMF_SEED", "17")
        assert run(*base, "--out", tmp_path / "a") == 0
        assert run(*base, "--seed", 3, "--out", tmp_path / "b") == 0
        monkeypatch.delenv("NEMF_SEED")
        assert run(*base, "--out", tmp_path / "c") == 0
        seeds = [{k: v for k, v, _ in read_config(tmp_path / d / "effective_config.txt")}["seed"] for d in "abc"]
        assert seeds == ["17", "3", "0"]
        monkeypatch.setenv("NEMF_SEED", "x")
        assert run(*base, "--out", tmp_path / "d") == 2


class TestTrain:
    def test_outputs_and_determinism(self, tmp_path, checkpoint):
        assert run("train", "--synthetic", 2, "--steps", 3, "--out", tmp_path / "a", "-q", *TINY) == 0
        assert (tmp_path / "a" / "final.nmfw").read_bytes() == checkpoint.read_bytes()
        rows = (tmp_path / "a" / "loss.csv").read_text().splitlines()
        assert rows[0] == "step,L_f,L_c,L_total" and len(rows) == 4
        model, _ = load_model(checkpoint)
        assert model.meta["extractor"]["grid"] == [16, 16] and model.meta["seed"] == 0

    def test_effective_config_reproduces(self, tmp_path, checkpoint):
        cfg = checkpoint.parent / "effective_config.txt"
        assert run("train", "--config", cfg, "--out", tmp_path / "b", "-q") == 0
        assert (tmp_path / "b" / "final.nmfw").read_bytes() == checkpoint.read_bytes()

    def test_seed_changes_checkpoint(self, tmp_path, checkpoint):
        assert run("train", "--synthetic", 2, "--steps", 3, "--seed", 1, "--out", tmp_path, "-q", *TINY) == 0
        assert (tmp_path / "final.nmfw").read_bytes() != checkpoint.read_bytes()

    def test_non_finite_loss_exit_code(self, tmp_path):
        with np.errstate(all="ignore"):
            assert run("train", "--synthetic", 1, "--steps", 2, "--tau", 1e-300, "--out", tmp_path, "-q", *TINY,
                       "--dtype", "float32") == 3

    def test_generated_benchmark_matches_synthetic_flag(self, tmp_path, checkpoint):
        assert run("gen-synthetic", "--count", 2, "--out", tmp_path / "g", "-q") == 0
        data = tmp_path / "g" / "annotations.jsonl"
        assert run("train", "--data", data, "--steps", 3, "--out", tmp_path / "t", "-q", *TINY) == 0
        assert (tmp_path / "t" / "final.nmfw").read_bytes() == checkpoint.read_bytes()


class TestInfer:
    def test_missing_checkpoint(self, tmp_path):
        assert infer(tmp_path, "a", tmp_path / "none.nmfw")[0] == 2
        assert run("infer", "--synthetic", 1, "--out", tmp_path) == 2

    def test_exhaustive_is_oracle(self, tmp_path, checkpoint):
        code, out = infer(tmp_path, "a", checkpoint, "--strategy", "exhaustive",
                          "--src-lattice", "8x8", "--tgt-lattice", "8x8")
        assert code == 0
        flow = FlowField.load(out / "flows" / "0000.nmff")
        assert flow.lattice == (8, 8) and flow.provenance == "exhaustive"
        model, emb = load_model(checkpoint)
        (s,) = generate_synthetic(1, "rigid", seed=7)
        p = prepare_pair(s.images, s.annotation)
        expect, _ = infer_exhaustive(MatchingField(model, embed(p.cost, emb), (31, 31), (31, 31)), (8, 8), (8, 8))
        expect.save(tmp_path / "expect.nmff")
        assert (tmp_path / "expect.nmff").read_bytes() == (out / "flows" / "0000.nmff").read_bytes()

    def test_guard(self, tmp_path, checkpoint):
        assert infer(tmp_path, "a", checkpoint, "--strategy", "exhaustive", "--guard", 1000)[0] == 2

    def test_batch_size_invariance_and_report(self, tmp_path, checkpoint):
        args = ["--rounds", 2, "--src-lattice", "12x12"]
        _, a = infer(tmp_path, "a", checkpoint, *args, "--batch-size", 100)
        _, b = infer(tmp_path, "b", checkpoint, *args, "--batch-size", 10000)
        assert (a / "flows" / "0000.nmff").read_bytes() == (b / "flows" / "0000.nmff").read_bytes()
        assert (a / "keypoints.json").read_bytes() == (b / "keypoints.json").read_bytes()
        rep = json.loads((a / "report.json").read_text())
        assert rep["batch_size"] == 100 and rep["max_peak_bytes"] > 0
        assert set(rep["pairs"][0]["seconds"]) == {"patchmatch", "coord_opt", "total"}

    def test_threads_do_not_change_output(self, tmp_path, checkpoint):
        _, a = infer(tmp_path, "a", checkpoint, "--rounds", 1, "--src-lattice", "8x8", "--threads", 1)
        _, b = infer(tmp_path, "b", checkpoint, "--rounds", 1, "--src-lattice", "8x8")
        assert (a / "flows" / "0000.nmff").read_bytes() == (b / "flows" / "0000.nmff").read_bytes()

    def test_ablation_pair_and_outputs(self, tmp_path, checkpoint):
        _, a = infer(tmp_path, "a", checkpoint, "--rounds", 1, "--src-lattice", "8x8", "--no-coord-opt", "--png")
        _, b = infer(tmp_path, "b", checkpoint, "--rounds", 1, "--src-lattice", "8x8")
        assert FlowField.load(a / "flows" / "0000.nmff").provenance == "patchmatch"
        assert FlowField.load(b / "flows" / "0000.nmff").provenance == "patchmatch+coord_opt"
        assert (a / "flows" / "0000.png").exists() and not (b / "flows" / "0000.png").exists()
        assert "coord_opt=false" in (a / "effective_config.txt").read_text()
        rec = json.loads((a / "keypoints.json").read_text())["pairs"][0]
        assert rec["src"] == "synthetic:rigid:7:0" and len(rec["kps"]) == 20

    def test_keypoints_only(self, tmp_path, checkpoint):
        assert infer(tmp_path, "a", checkpoint, "--rounds", 1, "--keypoints-only")[0] == 0


def _eval(tmp_path, preds, data, *extra):
    (tmp_path / "kp.json").write_text(json.dumps({"pairs": preds}))
    return run("eval", "--predictions", tmp_path / "kp.json", "--data", data, "--out", tmp_path, "-q", *extra)


def _row(tmp_path):
    header, row = (tmp_path / "pck.csv").read_text().splitlines()
    return dict(zip(header.split(",")[2:], map(float, row.split(",")[2:])))


class TestEval:
    @pytest.fixture
    def hand_built(self, tmp_path):
        gt = np.array([[10.0 * i, 5.0 * i] for i in range(10)])
        offsets = np.array([[0, 0], [3, 4], [6, 8], [0, 10], [7, 7], [0, 10.5], [8, 6], [11, 0], [20, 0], [9, 9]])
        ann = PairAnnotation("synthetic:rigid:0:0", "synthetic:rigid:0:0:target", np.column_stack([gt, gt]),
                             (0.0, 0.0, 100.0, 100.0), "", (120, 120), (120, 120))
        write_dataset([ann], tmp_path / "a.jsonl")
        pred = {"src": ann.src, "tgt": ann.tgt, "kps": [[c, r] for r, c in gt + offsets]}
        perfect = dict(pred, kps=[[c, r] for r, c in gt])
        return tmp_path / "a.jsonl", pred, perfect

    def test_hand_built_case(self, tmp_path, hand_built, capsys):
        data, pred, _ = hand_built
        assert _eval(tmp_path, [pred], data) == 0
        row = _row(tmp_path)
        assert row["0.1"] == pytest.approx(0.6)
        assert list(row.values()) == sorted(row.values())
        assert "PCK" in capsys.readouterr().out

    def test_perfect_predictions(self, tmp_path, hand_built):
        data, _, perfect = hand_built
        assert _eval(tmp_path, [perfect], data, "--thresholds", "0.01,0.05") == 0
        assert _row(tmp_path) == {"0.01": 1.0, "0.05": 1.0}

    def test_alignment_mismatch(self, tmp_path, hand_built):
        data, pred, _ = hand_built
        assert _eval(tmp_path, [pred, pred], data) == 2
        assert _eval(tmp_path, [dict(pred, src="other")], data) == 2
        assert _eval(tmp_path, [dict(pred, kps=pred["kps"][:9])], data) == 2
        (tmp_path / "junk.json").write_text("[1, 2]")
        assert run("eval", "--predictions", tmp_path / "junk.json", "--data", data, "--out", tmp_path) == 2

    def test_infer_then_eval(self, tmp_path, checkpoint):
        _, out = infer(tmp_path, "a", checkpoint, "--rounds", 1, "--src-lattice", "8x8")
        assert run("eval", "--predictions", out / "keypoints.json", "--synthetic", 1, "--data-seed", 7,
                   "--out", out, "-q") == 0
        assert all(0 <= v <= 1 for v in _row(out).values())


class TestExportField:
    def test_slice(self, tmp_path, checkpoint):
        out = tmp_path / "x"
        assert run("export-field", "--checkpoint", checkpoint, "--synthetic", 1, "--resolution", "5x7",
                   "--source-row", 3, "--source-col", 4, "--out", out, "-q") == 0
        lines = (out / "field_slice.csv").read_text().splitlines()
        assert "# source_row=3.0" in lines and "# resolution=5x7" in lines
        assert len([l for l in lines if not l.startswith("#")]) == 1 + 35

    def test_errors(self, tmp_path, checkpoint):
        base = ["export-field", "--checkpoint", checkpoint, "--synthetic", 1, "--out", tmp_path, "-q"]
        assert run(*base, "--resolution", "4000x4000") == 2
        assert run(*base, "--index", 5) == 2
        assert run(*base, "--source-row", 40) == 2


def test_gen_synthetic(tmp_path):
    assert run("gen-synthetic", "--count", 2, "--family", "tps", "--data-seed", 3, "--out", tmp_path, "-q") == 0
    names = sorted(p.name for p in (tmp_path / "images").iterdir())
    assert names == ["0000_src.png", "0000_tgt.png", "0001_src.png", "0001_tgt.png"]
    recs = [json.loads(l) for l in (tmp_path / "annotations.jsonl").read_text().splitlines()]
    assert [r["src"] for r in recs] == ["synthetic:tps:3:0", "synthetic:tps:3:1"]
    generate_synthetic(2, "tps", seed=3)[1].flow.save(tmp_path / "expect.nmff")
    assert (tmp_path / "flows" / "0001.nmff").read_bytes() == (tmp_path / "expect.nmff").read_bytes()
