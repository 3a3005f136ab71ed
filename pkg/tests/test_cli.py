import csv

import numpy as np
import pytest
from PIL import Image

from patchcompare.checkpoint import load_checkpoint, save_checkpoint
from patchcompare.cli import (EXIT_CAPABILITY, EXIT_CONFIG, EXIT_DEGENERATE, EXIT_IO, EXIT_OK, main,
                              read_config, read_descriptors)
from patchcompare.dataset import balanced_pairs, synthetic_store, write_pair_list, write_patch_store
from patchcompare.evaluation import DATASETS
from patchcompare.models import build_model
from patchcompare.stereo import read_disparity_bin, read_disparity_pgm


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    """Three tiny benchmark directories, each with a balanced pair list."""
    root = tmp_path_factory.mktemp("bench")
    out = {}
    for k, name in enumerate(DATASETS):
        store = synthetic_store(name, n_points=20, per_point=2, seed=k)
        d = root / name
        write_patch_store(store, d)
        pairs = balanced_pairs(store, 40, seed=k)
        write_pair_list(d / "m50.txt", store, pairs)
        out[name] = d
    return out


@pytest.fixture(scope="module")
def siam_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "siam.ckpt"
    save_checkpoint(path, build_model("siam", seed=0))
    return path


@pytest.fixture(scope="module")
def twoch_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "2ch.ckpt"
    save_checkpoint(path, build_model("2ch", seed=0))
    return path


def save_gray(path, a):
    Image.fromarray(np.clip(a * 255, 0, 255).astype(np.uint8)).save(path)


class TestConfig:
    def test_file_flags_and_set_precedence(self, bench, tmp_path):
        cfg = tmp_path / "t.cfg"
        cfg.write_text(f"# training\ndataset={bench['yosemite']}\niterations=1\nbatch_size=2\n"
                       f"seed=4\ncheckpoint={tmp_path / 'from_file.ckpt'}\n")
        code = main(["train", "--config", str(cfg), "--seed", "5", "--checkpoint", str(tmp_path / "m.ckpt"),
                     "--set", "seed=6"])
        assert code == EXIT_OK
        meta = load_checkpoint(tmp_path / "m.ckpt").meta
        assert meta["config"]["seed"] == 6 and meta["config"]["batch_size"] == 2
        assert not (tmp_path / "from_file.ckpt").exists()

    def test_read_config_ignores_comments(self, tmp_path):
        (tmp_path / "c").write_text("a = 1  # note\n\n# skip\nb=x=y\n")
        assert read_config(tmp_path / "c") == {"a": "1", "b": "x=y"}

    def test_malformed_line(self, tmp_path):
        (tmp_path / "c").write_text("no equals sign\n")
        assert main(["train", "--config", str(tmp_path / "c")]) == EXIT_CONFIG


class TestTrain:
    def test_writes_checkpoint_and_telemetry(self, bench, tmp_path):
        tel = tmp_path / "tel.csv"
        code = main(["train", "--dataset", str(bench["liberty"]), "--kind", "siam", "--iterations", "2",
                     "--checkpoint", str(tmp_path / "m.ckpt"), "--telemetry", str(tel),
                     "--set", "batch_size=4", "--set", "log_every=1",
                     "--set", f"pairs={bench['liberty'] / 'm50.txt'}"])
        assert code == EXIT_OK
        ck = load_checkpoint(tmp_path / "m.ckpt")
        assert ck.normalization.source == "liberty"
        assert ck.meta["iterations"] == 2 and ck.meta["pairs"] == "m50.txt"
        rows = list(csv.reader(open(tel)))
        assert rows[0] == ["iteration", "loss", "wall_time"] and len(rows) == 3

    def test_missing_iterations(self, bench, tmp_path):
        assert main(["train", "--dataset", str(bench["liberty"]),
                     "--checkpoint", str(tmp_path / "m.ckpt")]) == EXIT_CONFIG

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--dataset", str(tmp_path / "nope"), "--iterations", "1",
                     "--checkpoint", str(tmp_path / "m.ckpt")]) == EXIT_IO

    def test_unknown_kind(self, bench, tmp_path):
        assert main(["train", "--dataset", str(bench["liberty"]), "--iterations", "1", "--kind", "3ch",
                     "--checkpoint", str(tmp_path / "m.ckpt")]) == EXIT_CONFIG

    def test_two_channel_l2(self, bench, tmp_path):
        assert main(["train", "--dataset", str(bench["liberty"]), "--iterations", "1", "--set", "mode=l2",
                     "--checkpoint", str(tmp_path / "m.ckpt")]) == EXIT_CAPABILITY


def eval_args(bench, checkpoints, tmp_path):
    args = ["eval", "--report", str(tmp_path / "report.csv"), "--roc-dir", str(tmp_path / "roc")]
    for name in DATASETS:
        args += ["--checkpoint", f"{name}={checkpoints[name]}", "--dataset", f"{name}={bench[name]}",
                 "--pairs", f"{name}={bench[name] / 'm50.txt'}"]
    return args


class TestEval:
    def test_oracle_protocol(self, bench, tmp_path):
        code = main(eval_args(bench, dict.fromkeys(DATASETS, "oracle"), tmp_path))
        assert code == EXIT_OK
        rows = list(csv.reader(open(tmp_path / "report.csv")))
        assert [r[:2] for r in rows[1:7]] == [["Yos", "ND"], ["Yos", "Lib"], ["ND", "Yos"], ["ND", "Lib"],
                                              ["Lib", "Yos"], ["Lib", "ND"]]
        assert all(float(r[2]) == 0.0 for r in rows[1:])
        assert len(list((tmp_path / "roc").glob("roc_*.csv"))) == 6

    def test_real_checkpoint(self, bench, siam_ckpt, tmp_path):
        code = main(eval_args(bench, dict.fromkeys(DATASETS, siam_ckpt), tmp_path))
        assert code == EXIT_OK
        values = [float(r[2]) for r in list(csv.reader(open(tmp_path / "report.csv")))[1:]]
        assert all(0 <= v <= 1 for v in values)

    def test_aliases(self, bench, tmp_path):
        args = ["eval", "--report", str(tmp_path / "r.csv")]
        for alias, name in zip(("yos", "ND", "lib"), DATASETS):
            args += ["--checkpoint", f"{alias}=oracle", "--dataset", f"{alias}={bench[name]}",
                     "--pairs", f"{alias}={bench[name] / 'm50.txt'}"]
        assert main(args) == EXIT_OK

    def test_missing_combination(self, bench, tmp_path):
        args = eval_args(bench, dict.fromkeys(DATASETS, "oracle"), tmp_path)
        cut = args.index("liberty=oracle")
        del args[cut - 1:cut + 1]
        assert main(args) == EXIT_CONFIG

    def test_single_class_pairs(self, bench, tmp_path):
        store = synthetic_store("notredame", n_points=20, per_point=2, seed=1)
        pos = [(i, i + 1) for i in range(0, 40, 2)]
        write_pair_list(tmp_path / "pos.txt", store, pos)
        args = eval_args(bench, dict.fromkeys(DATASETS, "oracle"), tmp_path)
        i = args.index(f"notredame={bench['notredame'] / 'm50.txt'}")
        args[i] = f"notredame={tmp_path / 'pos.txt'}"
        assert main(args) == EXIT_DEGENERATE


@pytest.fixture(scope="module")
def stereo_images(tmp_path_factory):
    root = tmp_path_factory.mktemp("stereo")
    wide = np.random.default_rng(0).random((70, 78))
    save_gray(root / "left.png", wide[:, :74])
    save_gray(root / "right.png", wide[:, 4:78])
    gt = np.full((70, 74), 4, np.uint8)
    Image.fromarray(gt).save(root / "gt.png")
    occ = np.zeros((70, 74), np.uint8)
    occ[:, :4] = 255
    Image.fromarray(occ).save(root / "occ.png")
    return root


class TestStereo:
    def test_outputs_and_stats(self, siam_ckpt, stereo_images, tmp_path):
        s = stereo_images
        out = tmp_path / "out"
        code = main(["stereo", "--checkpoint", str(siam_ckpt), "--left", str(s / "left.png"),
                     "--right", str(s / "right.png"), "--dmax", "5", "--cost", "l2", "--out-dir", str(out),
                     "--gt", str(s / "gt.png"), "--occlusion", str(s / "occ.png")])
        assert code == EXIT_OK
        for name in ("wta", "mrf"):
            pgm = read_disparity_pgm(out / f"{name}.pgm")
            b, d_max = read_disparity_bin(out / f"{name}.bin")
            assert pgm.values.shape == (70, 74) and d_max == 5
            np.testing.assert_array_equal(pgm.values, b.values)
        rows = list(csv.reader(open(out / "stats.csv")))
        assert rows[0] == ["map", "threshold", "fraction_all", "fraction_unoccluded"]
        assert [r[:2] for r in rows[1:]] == [[m, t] for m in ("wta", "mrf") for t in ("1", "3", "5")]

    def test_two_channel_l2_cost(self, twoch_ckpt, stereo_images, tmp_path):
        s = stereo_images
        assert main(["stereo", "--checkpoint", str(twoch_ckpt), "--left", str(s / "left.png"),
                     "--right", str(s / "right.png"), "--dmax", "3", "--cost", "l2",
                     "--out-dir", str(tmp_path)]) == EXIT_CAPABILITY

    @pytest.mark.parametrize("dmax", ["0", "-2", "x"])
    def test_bad_dmax(self, siam_ckpt, stereo_images, tmp_path, dmax):
        s = stereo_images
        assert main(["stereo", "--checkpoint", str(siam_ckpt), "--left", str(s / "left.png"),
                     "--right", str(s / "right.png"), "--dmax", dmax, "--out-dir", str(tmp_path)]) == EXIT_CONFIG

    def test_missing_image(self, siam_ckpt, stereo_images, tmp_path):
        s = stereo_images
        assert main(["stereo", "--checkpoint", str(siam_ckpt), "--left", str(s / "none.png"),
                     "--right", str(s / "right.png"), "--dmax", "3", "--out-dir", str(tmp_path)]) == EXIT_IO


class TestDescribeAndMatch:
    def test_describe_dataset(self, bench, siam_ckpt, tmp_path):
        code = main(["describe", "--checkpoint", str(siam_ckpt), "--patches", str(bench["yosemite"]),
                     "--count", "10", "--out", str(tmp_path / "d.bin")])
        assert code == EXIT_OK
        data = (tmp_path / "d.bin").read_bytes()
        assert data[:8] == (10).to_bytes(4, "little") + (256).to_bytes(4, "little")
        assert read_descriptors(tmp_path / "d.bin").shape == (10, 256)

    def test_describe_grid_image(self, siam_ckpt, tmp_path):
        save_gray(tmp_path / "grid.png", np.random.default_rng(0).random((128, 192)))
        assert main(["describe", "--checkpoint", str(siam_ckpt), "--patches", str(tmp_path / "grid.png"),
                     "--out", str(tmp_path / "d.bin")]) == EXIT_OK
        assert read_descriptors(tmp_path / "d.bin").shape == (6, 256)

    def test_describe_two_channel(self, bench, twoch_ckpt, tmp_path):
        assert main(["describe", "--checkpoint", str(twoch_ckpt), "--patches", str(bench["yosemite"]),
                     "--out", str(tmp_path / "d.bin")]) == EXIT_CAPABILITY

    def test_count_too_large(self, bench, siam_ckpt, tmp_path):
        assert main(["describe", "--checkpoint", str(siam_ckpt), "--patches", str(bench["yosemite"]),
                     "--count", "1000", "--out", str(tmp_path / "d.bin")]) == EXIT_IO

    @pytest.mark.parametrize("ckpt", ["siam_ckpt", "twoch_ckpt"])
    def test_match_identity(self, ckpt, request, tmp_path):
        path = request.getfixturevalue(ckpt)
        img = np.random.default_rng(1).random((120, 120))
        save_gray(tmp_path / "a.png", img)
        (tmp_path / "kp.txt").write_text("30 30 8\n80 40 8\n50 90 8\n")
        (tmp_path / "H.txt").write_text("1 0 0\n0 1 0\n0 0 1\n")
        code = main(["match", "--checkpoint", str(path), "--image1", str(tmp_path / "a.png"),
                     "--keypoints1", str(tmp_path / "kp.txt"), "--image2", str(tmp_path / "a.png"),
                     "--keypoints2", str(tmp_path / "kp.txt"), "--homography", str(tmp_path / "H.txt"),
                     "--out", str(tmp_path / "m.csv"), "--map-out", str(tmp_path / "map.txt")])
        assert code == EXIT_OK
        rows = list(csv.reader(open(tmp_path / "m.csv")))
        assert rows[0] == ["rank", "index1", "index2", "score"] and len(rows) == 10
        scores = [float(r[3]) for r in rows[1:]]
        assert scores == sorted(scores, reverse=True)
        assert 0 < float((tmp_path / "map.txt").read_text()) <= 1


class TestInvariants:
    def test_train_is_bit_reproducible(self, bench, tmp_path):
        for name in ("a", "b"):
            assert main(["train", "--dataset", str(bench["notredame"]), "--kind", "siam", "--iterations", "2",
                         "--set", "batch_size=4", "--seed", "3",
                         "--checkpoint", str(tmp_path / f"{name}.ckpt")]) == EXIT_OK
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_stereo_is_bit_reproducible(self, siam_ckpt, stereo_images, tmp_path):
        s = stereo_images
        for name in ("a", "b"):
            assert main(["stereo", "--checkpoint", str(siam_ckpt), "--left", str(s / "left.png"),
                         "--right", str(s / "right.png"), "--dmax", "3",
                         "--out-dir", str(tmp_path / name)]) == EXIT_OK
        for f in ("wta.bin", "mrf.bin", "wta.pgm", "mrf.pgm"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    @pytest.mark.parametrize("command,columns", [
        ("train", "iteration, loss, wall_time"),
        ("eval", "train, test, fpr95, fpr95_percent"),
        ("stereo", "map, threshold, fraction_all, fraction_unoccluded"),
        ("match", "rank, index1, index2, score")])
    def test_csv_columns_in_help(self, command, columns, capsys):
        with pytest.raises(SystemExit):
            main([command, "--help"])
        assert columns in capsys.readouterr().out
