"""End-to-end command-line runs: exit codes, outputs, and stage caching."""

import json
import re

import numpy as np
import pytest

from vladbench import load_descriptor_matrix, load_vlad, read_ppm
from vladbench.cli import main


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    code = main(
        [
            "synth", "--out", str(root), "--seed", "3", "--groups", "4",
            "--images-per-group", "3", "--side", "4", "--depth", "8",
        ]
    )
    assert code == 0
    return root


@pytest.fixture(scope="module")
def artifacts(dataset, tmp_path_factory):
    """Codebook, encoded descriptors, and index for the module dataset."""
    art = tmp_path_factory.mktemp("artifacts")
    manifest = str(dataset / "manifest.json")
    cb = art / "conv3_s1.cbk1"
    assert main(
        [
            "train-vocab", "--manifest", manifest, "--layer", "conv3",
            "--scale", "1", "--k", "8", "--seed", "1", "--out", str(cb),
        ]
    ) == 0
    vlads = art / "vlads_s1"
    assert main(
        [
            "encode", "--manifest", manifest, "--layer", "conv3",
            "--scales", "1", "--codebook", str(cb), "--out-dir", str(vlads),
        ]
    ) == 0
    index = art / "index_s1.cds1"
    assert main(["index", "--vlads", str(vlads), "--out", str(index)]) == 0
    return {"manifest": manifest, "codebook": cb, "vlads": vlads, "index": index}


class TestSynth:
    def test_prints_manifest_path(self, tmp_path, capsys):
        out = tmp_path / "ds"
        code = main(
            [
                "synth", "--out", str(out), "--seed", "1", "--groups", "2",
                "--images-per-group", "2", "--side", "3", "--depth", "4",
            ]
        )
        captured = capsys.readouterr()
        assert code == 0
        assert captured.out.strip() == str(out / "manifest.json")
        assert (out / "manifest.json").is_file()
        assert (out / "ground_truth.json").is_file()


class TestQueryCommand:
    def test_ranked_output_format(self, artifacts, capsys):
        code = main(
            ["query", "--index", str(artifacts["index"]), "--query-id", "100000"]
        )
        captured = capsys.readouterr()
        assert code == 0
        lines = captured.out.splitlines()
        assert len(lines) == 11  # 12 images minus the query itself
        for rank, line in enumerate(lines, 1):
            assert re.fullmatch(rf"{rank}\t\d+\t\d+\.\d{{6}}", line)
        dists = [float(line.split("\t")[2]) for line in lines]
        assert dists == sorted(dists)

    def test_top_k_and_include_self(self, artifacts, capsys):
        code = main(
            [
                "query", "--index", str(artifacts["index"]), "--query-id",
                "100000", "--top-k", "3", "--include-self",
            ]
        )
        captured = capsys.readouterr()
        assert code == 0
        lines = captured.out.splitlines()
        assert len(lines) == 3
        assert lines[0] == "1\t100000\t0.000000"

    def test_unknown_query_id_is_exit_3(self, artifacts, capsys):
        code = main(
            ["query", "--index", str(artifacts["index"]), "--query-id", "nope"]
        )
        assert code == 3
        assert "nope" in capsys.readouterr().err


class TestEvaluateCommand:
    def test_stdout_map_then_csv_row(self, artifacts, capsys, tmp_path):
        csv_file = tmp_path / "result.csv"
        code = main(
            [
                "evaluate", "--index", str(artifacts["index"]),
                "--manifest", artifacts["manifest"], "--csv", str(csv_file),
            ]
        )
        captured = capsys.readouterr()
        assert code == 0
        lines = captured.out.splitlines()
        assert re.fullmatch(r"\d\.\d{4}", lines[0])
        map_value = float(lines[0])
        assert 0.0 <= map_value <= 1.0
        fields = lines[1].split(",")
        assert fields[0] == "synth-seed3"
        assert fields[2] == "discrete"
        assert fields[3] == "4"  # one query per group
        assert float(fields[5]) == map_value
        header, row = csv_file.read_text().splitlines()
        assert header == "dataset,descriptors,ap_variant,queries,skipped,map"
        assert row == lines[1]

    def test_landmarks_protocol_needs_gt_dir(self, artifacts, capsys):
        code = main(
            [
                "evaluate", "--index", str(artifacts["index"]),
                "--manifest", artifacts["manifest"], "--protocol", "landmarks",
            ]
        )
        assert code == 3
        assert "--gt-dir" in capsys.readouterr().err


class TestCaching:
    def test_train_vocab_skips_when_cached(self, artifacts, capsys):
        args = [
            "train-vocab", "--manifest", artifacts["manifest"], "--layer",
            "conv3", "--scale", "1", "--k", "8", "--seed", "1",
            "--out", str(artifacts["codebook"]),
        ]
        before = artifacts["codebook"].read_bytes()
        assert main(args) == 0
        assert "up to date" in capsys.readouterr().err
        assert main(args + ["--force"]) == 0
        err = capsys.readouterr().err
        assert "up to date" not in err
        assert "k=8" in err
        # deterministic training: the forced rerun writes identical bytes
        assert artifacts["codebook"].read_bytes() == before

    def test_parameter_change_invalidates_cache(self, artifacts, tmp_path, capsys):
        out = tmp_path / "cb.cbk1"
        base = [
            "train-vocab", "--manifest", artifacts["manifest"], "--layer",
            "conv3", "--scale", "1", "--seed", "1", "--out", str(out),
        ]
        assert main(base + ["--k", "4"]) == 0
        capsys.readouterr()
        assert main(base + ["--k", "5"]) == 0
        err = capsys.readouterr().err
        assert "up to date" not in err
        assert "k=5" in err

    def test_encode_skips_when_cached(self, artifacts, capsys):
        args = [
            "encode", "--manifest", artifacts["manifest"], "--layer", "conv3",
            "--scales", "1", "--codebook", str(artifacts["codebook"]),
            "--out-dir", str(artifacts["vlads"]),
        ]
        assert main(args) == 0
        assert "up to date" in capsys.readouterr().err


class TestMultiscale:
    def test_codebook_count_must_match_scales(self, artifacts, capsys):
        code = main(
            [
                "encode", "--manifest", artifacts["manifest"], "--layer",
                "conv3", "--scales", "1,2", "--codebook",
                str(artifacts["codebook"]), "--out-dir", "unused",
            ]
        )
        assert code == 3
        assert "one codebook per scale" in capsys.readouterr().err

    def test_codebook_scale_must_match(self, artifacts, capsys):
        code = main(
            [
                "encode", "--manifest", artifacts["manifest"], "--layer",
                "conv3", "--scales", "2", "--codebook",
                str(artifacts["codebook"]), "--out-dir", "unused",
            ]
        )
        assert code == 3
        assert "scale" in capsys.readouterr().err

    def test_two_scale_encode(self, artifacts, tmp_path, capsys):
        cb2 = tmp_path / "conv3_s2.cbk1"
        assert main(
            [
                "train-vocab", "--manifest", artifacts["manifest"], "--layer",
                "conv3", "--scale", "2", "--k", "8", "--seed", "1",
                "--out", str(cb2),
            ]
        ) == 0
        out_dir = tmp_path / "vlads_s12"
        assert main(
            [
                "encode", "--manifest", artifacts["manifest"], "--layer",
                "conv3", "--scales", "1,2", "--codebook",
                str(artifacts["codebook"]), "--codebook", str(cb2),
                "--out-dir", str(out_dir),
            ]
        ) == 0
        capsys.readouterr()
        vlad = load_vlad(out_dir / "100000.vlad")
        assert vlad.scale_ids == (1, 2)
        assert vlad.normalization == "intra+l2"
        assert vlad.size == 8 * 8 * 2
        assert abs(np.linalg.norm(vlad.values) - 1.0) < 1e-6


class TestProjectionCommands:
    def test_fit_project_evaluate(self, artifacts, tmp_path, capsys):
        prj = tmp_path / "p.prj1"
        assert main(
            [
                "fit-pca", "--vlads", str(artifacts["vlads"]), "--dim", "4",
                "--out", str(prj),
            ]
        ) == 0
        cds = tmp_path / "projected.cds1"
        assert main(
            [
                "project", "--vlads", str(artifacts["vlads"]), "--projection",
                str(prj), "--out", str(cds),
            ]
        ) == 0
        capsys.readouterr()
        index = load_descriptor_matrix(cds)
        assert index.dim == 4
        assert index.count == 12
        np.testing.assert_allclose(
            np.linalg.norm(index.vectors, axis=1), 1.0, atol=1e-6
        )
        assert main(
            ["evaluate", "--index", str(cds), "--manifest", artifacts["manifest"]]
        ) == 0
        lines = capsys.readouterr().out.splitlines()
        assert 0.0 <= float(lines[0]) <= 1.0

    def test_dim_too_large_is_exit_3(self, artifacts, tmp_path, capsys):
        code = main(
            [
                "fit-pca", "--vlads", str(artifacts["vlads"]), "--dim", "60",
                "--out", str(tmp_path / "p.prj1"),
            ]
        )
        assert code == 3
        assert "dim_out" in capsys.readouterr().err


class TestSweepCommand:
    def test_artifacts_and_stdout(self, artifacts, tmp_path, capsys):
        out_dir = tmp_path / "sweep"
        code = main(
            [
                "sweep", "--manifest", artifacts["manifest"], "--layers",
                "conv3", "--scale-sets", "1;1,2", "--k", "8", "--seed", "1",
                "--dim", "none", "--out-dir", str(out_dir),
            ]
        )
        captured = capsys.readouterr()
        assert code == 0
        csv_text = (out_dir / "sweep.csv").read_text()
        assert captured.out == csv_text
        lines = csv_text.splitlines()
        assert lines[0] == "layer,scales,normalization,dim,queries,map"
        assert len(lines) == 3
        assert lines[1].startswith("conv3,1,intra,")
        assert lines[2].startswith("conv3,1+2,intra,")
        for line in lines[1:]:
            assert 0.0 <= float(line.split(",")[-1]) <= 1.0
        assert (out_dir / "sweep.dat").is_file()
        assert (out_dir / "sweep.meta.json").is_file()

    def test_config_file_matches_flags(self, artifacts, tmp_path, capsys):
        flag_dir = tmp_path / "by_flags"
        assert main(
            [
                "sweep", "--manifest", artifacts["manifest"], "--layers",
                "conv3", "--scale-sets", "1", "--k", "8", "--seed", "1",
                "--dim", "4", "--out-dir", str(flag_dir),
            ]
        ) == 0
        config = tmp_path / "config.json"
        config.write_text(
            json.dumps(
                {"layers": ["conv3"], "scale_sets": [[1]], "k": 8, "seed": 1,
                 "dim_out": 4}
            )
        )
        cfg_dir = tmp_path / "by_config"
        assert main(
            [
                "sweep", "--manifest", artifacts["manifest"], "--config",
                str(config), "--out-dir", str(cfg_dir),
            ]
        ) == 0
        capsys.readouterr()
        assert (
            (cfg_dir / "sweep.csv").read_text()
            == (flag_dir / "sweep.csv").read_text()
        )

    def test_flags_override_config(self, artifacts, tmp_path, capsys):
        config = tmp_path / "config.json"
        config.write_text(
            json.dumps(
                {"layers": ["conv3"], "scale_sets": [[1]], "k": 8, "seed": 1,
                 "normalization": "ssr", "dim_out": None}
            )
        )
        plain = tmp_path / "plain"
        assert main(
            [
                "sweep", "--manifest", artifacts["manifest"], "--config",
                str(config), "--out-dir", str(plain),
            ]
        ) == 0
        row = (plain / "sweep.csv").read_text().splitlines()[1]
        assert row.startswith("conv3,1,ssr,none,")
        overridden = tmp_path / "overridden"
        assert main(
            [
                "sweep", "--manifest", artifacts["manifest"], "--config",
                str(config), "--normalization", "intra", "--dim", "4",
                "--out-dir", str(overridden),
            ]
        ) == 0
        capsys.readouterr()
        row = (overridden / "sweep.csv").read_text().splitlines()[1]
        assert row.startswith("conv3,1,intra,4,")

    def test_dim_none_flag_beats_config(self, artifacts, tmp_path, capsys):
        config = tmp_path / "config.json"
        config.write_text(
            json.dumps(
                {"layers": ["conv3"], "scale_sets": [[1]], "k": 8, "seed": 1,
                 "dim_out": 4}
            )
        )
        out = tmp_path / "out"
        assert main(
            [
                "sweep", "--manifest", artifacts["manifest"], "--config",
                str(config), "--dim", "none", "--out-dir", str(out),
            ]
        ) == 0
        capsys.readouterr()
        row = (out / "sweep.csv").read_text().splitlines()[1]
        assert row.startswith("conv3,1,intra,none,")

    def test_meta_config_block_replays(self, artifacts, tmp_path, capsys):
        first = tmp_path / "first"
        assert main(
            [
                "sweep", "--manifest", artifacts["manifest"], "--layers",
                "conv3", "--scale-sets", "1;1,2", "--k", "8", "--seed", "1",
                "--dim", "none", "--out-dir", str(first),
            ]
        ) == 0
        meta = json.loads((first / "sweep.meta.json").read_text())
        replay = tmp_path / "replay.json"
        replay.write_text(json.dumps(meta["config"]))
        second = tmp_path / "second"
        assert main(
            [
                "sweep", "--manifest", artifacts["manifest"], "--config",
                str(replay), "--out-dir", str(second),
            ]
        ) == 0
        capsys.readouterr()
        assert (
            (second / "sweep.csv").read_text()
            == (first / "sweep.csv").read_text()
        )

    def test_bad_config_files(self, artifacts, tmp_path, capsys):
        unknown = tmp_path / "unknown.json"
        unknown.write_text(json.dumps({"layers": ["conv3"], "kk": 8}))
        code = main(
            [
                "sweep", "--manifest", artifacts["manifest"], "--config",
                str(unknown), "--out-dir", str(tmp_path / "o1"),
            ]
        )
        assert code == 3
        assert "unknown config keys" in capsys.readouterr().err
        malformed = tmp_path / "malformed.json"
        malformed.write_text("{not json")
        code = main(
            [
                "sweep", "--manifest", artifacts["manifest"], "--config",
                str(malformed), "--out-dir", str(tmp_path / "o2"),
            ]
        )
        assert code == 2
        assert "format error" in capsys.readouterr().err
        code = main(
            [
                "sweep", "--manifest", artifacts["manifest"], "--config",
                str(tmp_path / "absent.json"), "--out-dir", str(tmp_path / "o3"),
            ]
        )
        assert code == 2
        assert "missing input" in capsys.readouterr().err


class TestVizCommands:
    def test_correspondence_writes_image(self, artifacts, tmp_path, capsys):
        out = tmp_path / "mosaic.ppm"
        code = main(
            [
                "viz-correspondence", "--manifest", artifacts["manifest"],
                "--layer", "conv3", "--target", "100000", "--k-nn", "2",
                "--out", str(out),
            ]
        )
        capsys.readouterr()
        assert code == 0
        assert read_ppm(out).shape == (32, 32, 3)

    def test_clusters_writes_grid(self, artifacts, tmp_path, capsys):
        out = tmp_path / "clusters.ppm"
        code = main(
            [
                "viz-clusters", "--manifest", artifacts["manifest"], "--layer",
                "conv3", "--rows", "2", "--k-nn", "2", "--seed", "0",
                "--out", str(out),
            ]
        )
        capsys.readouterr()
        assert code == 0
        assert read_ppm(out).shape == (2 * 8, 3 * 8, 3)


class TestExitCodes:
    def test_usage_errors_exit_1(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 1
        with pytest.raises(SystemExit) as exc:
            main(["query", "--index", "x.cds1"])  # missing --query-id
        assert exc.value.code == 1
        with pytest.raises(SystemExit) as exc:
            main(["no-such-command"])
        assert exc.value.code == 1

    def test_missing_file_exit_2(self, tmp_path, capsys):
        code = main(
            ["query", "--index", str(tmp_path / "no.cds1"), "--query-id", "a"]
        )
        assert code == 2
        assert "missing input" in capsys.readouterr().err

    def test_malformed_file_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.cds1"
        bad.write_bytes(b"JUNKJUNKJUNK")
        code = main(["query", "--index", str(bad), "--query-id", "a"])
        assert code == 2
        assert "format error" in capsys.readouterr().err

    def test_impossible_k_exit_3(self, dataset, tmp_path, capsys):
        code = main(
            [
                "train-vocab", "--manifest", str(dataset / "manifest.json"),
                "--layer", "conv3", "--scale", "1", "--k", "100000",
                "--out", str(tmp_path / "cb.cbk1"),
            ]
        )
        assert code == 3
        capsys.readouterr()

    def test_version_exits_0(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "vladbench" in capsys.readouterr().out
