import json

from conftest import build_env, golden_plans
from markpick.cli import main
from markpick.dataset import load_manifest


def run_cli(*argv):
    return main([str(a) for a in argv])


def do_run(env, tmp_path, variant, name):
    out = tmp_path / name
    code = run_cli(
        "run",
        "--config", env.config_path,
        "--split", "custom:val",
        "--variant", variant,
        "--out-dir", out,
        "--cache-dir", tmp_path / "cache",
    )
    return code, out


class TestCmdRun:
    def test_full_run_writes_report_and_traces(self, golden_env, tmp_path, capsys):
        code, out = do_run(golden_env, tmp_path, "full", "run_full")
        assert code == 0
        assert len(list((out / "traces").glob("*.json"))) == 20
        report = (out / "report.md").read_text()
        assert "90.00" in report and "80.00" in report
        assert (out / "evals.jsonl").read_text().count("\n") == 20
        printed = capsys.readouterr().out
        assert "90.00" in printed

    def test_missing_config_exits_2(self, tmp_path, capsys):
        code = run_cli(
            "run",
            "--config", tmp_path / "nope.toml",
            "--split", "custom:val",
            "--out-dir", tmp_path / "o",
        )
        assert code == 2
        assert "not found" in capsys.readouterr().err

    def test_unknown_split_exits_2(self, golden_env, tmp_path, capsys):
        code = run_cli(
            "run",
            "--config", golden_env.config_path,
            "--split", "refcoco:testA",
            "--out-dir", tmp_path / "o",
        )
        assert code == 2
        assert "no manifest configured" in capsys.readouterr().err

    def test_unreachable_http_detector_exits_4(self, golden_env, tmp_path):
        config = tmp_path / "config.toml"
        config.write_text(
            f"""\
[mllm]
model = "mock-mllm"
transport = "mock"
fixtures = "{golden_env.mllm_fixture_path}"

[detector]
transport = "http"
endpoint = "http://127.0.0.1:9"
timeout = 2.0

[data]
image_root = "{golden_env.image_root}"

[data.manifests]
"custom:val" = "{golden_env.manifest_path}"
""",
            encoding="utf-8",
        )
        code = run_cli(
            "run", "--config", config, "--split", "custom:val", "--out-dir", tmp_path / "o"
        )
        assert code == 4

    def test_failure_ceiling_exits_3(self, golden_env, tmp_path):
        manifest = tmp_path / "patched.jsonl"
        lines = golden_env.manifest_path.read_text().splitlines()[:19]
        for i in range(2):
            lines.append(
                json.dumps(
                    {
                        "id": f"bad{i}",
                        "image": f"images/missing{i}.png",
                        "expression": "not really there",
                        "bbox": [8, 8, 18, 18],
                        "dataset": "custom",
                        "split": "val",
                    }
                )
            )
        manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
        config = tmp_path / "config.toml"
        config.write_text(
            f"""\
[mllm]
model = "mock-mllm"
transport = "mock"
fixtures = "{golden_env.mllm_fixture_path}"

[detector]
id = "mock-det"
transport = "mock"
fixtures = "{golden_env.detector_fixture_path}"

[data]
image_root = "{golden_env.image_root}"

[data.manifests]
"custom:val" = "{manifest}"
""",
            encoding="utf-8",
        )
        code = run_cli(
            "run",
            "--config", config,
            "--split", "custom:val",
            "--out-dir", tmp_path / "o",
            "--cache-dir", tmp_path / "cache",
        )
        assert code == 3
        # partial results still persisted and scored
        assert (tmp_path / "o" / "report.json").exists()


class TestCmdAblate:
    def test_grid_over_all_variants(self, golden_env, tmp_path, capsys):
        out = tmp_path / "ablation"
        code = run_cli(
            "ablate",
            "--config", golden_env.config_path,
            "--split", "custom:val",
            "--out-dir", out,
            "--cache-dir", tmp_path / "cache",
        )
        assert code == 0
        for variant in ("full", "no_tase", "no_moos", "detector_only"):
            assert (out / variant / "report.json").exists()
        grid = (out / "ablation.csv").read_text().splitlines()
        assert grid[0] == "variant,subject_extraction,detector,choice_selection,acc_025,acc_05"
        rows = {line.split(",")[0]: line.split(",") for line in grid[1:]}
        assert rows["full"][4:] == ["90.00", "80.00"]
        assert rows["no_tase"][4:] == ["90.00", "80.00"]
        assert rows["no_moos"][4:] == ["80.00", "75.00"]
        assert rows["detector_only"][4:] == ["80.00", "75.00"]
        assert rows["full"][1:4] == ["x", "x", "x"]
        assert rows["detector_only"][1:4] == ["", "x", ""]
        assert (out / "ablation.md").exists()

    def test_variants_share_the_detect_cache(self, golden_env, tmp_path):
        # per-(image, prompt) transport calls across the whole grid:
        # first variant pays for subject prompts, no_tase pays for the
        # full-expression prompts, the rest ride the cache.
        import markpick.detector as detector_mod

        calls = []
        original = detector_mod.MockDetectorBackend.detect

        def counting(self, request):
            from markpick.detector import image_content_hash

            calls.append((image_content_hash(request.image), request.prompt))
            return original(self, request)

        detector_mod.MockDetectorBackend.detect = counting
        try:
            code = run_cli(
                "ablate",
                "--config", golden_env.config_path,
                "--split", "custom:val",
                "--out-dir", tmp_path / "out",
                "--cache-dir", tmp_path / "cache",
            )
        finally:
            detector_mod.MockDetectorBackend.detect = original
        assert code == 0
        assert len(calls) == len(set(calls)) == 40  # 21 subject + 19 expression prompts


class TestCmdReport:
    def test_delta_between_runs(self, golden_env, tmp_path, capsys):
        code_a, run_a = do_run(golden_env, tmp_path, "detector_only", "base")
        code_b, run_b = do_run(golden_env, tmp_path, "full", "ours")
        assert code_a == 0 and code_b == 0
        capsys.readouterr()

        out = tmp_path / "merged"
        code = run_cli("report", run_a, run_b, "--baseline", run_a, "--out-dir", out)
        assert code == 0
        csv_lines = (out / "report.csv").read_text().splitlines()
        ours_row = next(l for l in csv_lines if ":full" in l)
        assert "10.00" in ours_row and "5.00" in ours_row  # 90-80 and 80-75

    def test_three_runs_yield_three_rows_two_deltas(self, golden_env, tmp_path):
        _, base = do_run(golden_env, tmp_path, "detector_only", "base")
        _, mid = do_run(golden_env, tmp_path, "no_tase", "mid")
        _, top = do_run(golden_env, tmp_path, "full", "top")
        out = tmp_path / "merged"
        assert run_cli("report", base, mid, top, "--baseline", base, "--out-dir", out) == 0
        csv_lines = (out / "report.csv").read_text().splitlines()
        assert len(csv_lines) == 4  # header + 3 rows
        delta_cells = [line.split(",")[6] for line in csv_lines[1:]]
        assert delta_cells == ["", "10.00", "10.00"]  # baseline row has no delta

    def test_report_is_reproducible_byte_for_byte(self, golden_env, tmp_path):
        _, run_a = do_run(golden_env, tmp_path, "detector_only", "base")
        _, run_b = do_run(golden_env, tmp_path, "full", "ours")
        out1, out2 = tmp_path / "m1", tmp_path / "m2"
        assert run_cli("report", run_a, run_b, "--baseline", run_a, "--out-dir", out1) == 0
        assert run_cli("report", run_a, run_b, "--baseline", run_a, "--out-dir", out2) == 0
        assert (out1 / "report.md").read_bytes() == (out2 / "report.md").read_bytes()
        assert (out1 / "report.csv").read_bytes() == (out2 / "report.csv").read_bytes()

    def test_incompatible_splits_exit_2(self, golden_env, tmp_path, capsys):
        _, run_a = do_run(golden_env, tmp_path, "full", "a")
        other_env = build_env(tmp_path / "other", golden_plans(), split="testA")
        out_b = tmp_path / "b"
        assert (
            run_cli(
                "run",
                "--config", other_env.config_path,
                "--split", "custom:testA",
                "--out-dir", out_b,
                "--cache-dir", tmp_path / "cache2",
            )
            == 0
        )
        code = run_cli(
            "report", run_a, out_b, "--baseline", run_a, "--out-dir", tmp_path / "m"
        )
        assert code == 2
        assert "incompatible splits" in capsys.readouterr().err


class TestCmdVisualize:
    def test_writes_marked_overlay_and_caption(self, golden_env, tmp_path):
        _, run_dir = do_run(golden_env, tmp_path, "full", "run")
        out = tmp_path / "viz"
        code = run_cli(
            "visualize", "--run-dir", run_dir, "--ids", "s01,s16", "--out-dir", out
        )
        assert code == 0
        assert (out / "s01_marked.png").exists()
        assert (out / "s01_overlay.png").exists()
        caption = (out / "s01.txt").read_text()
        assert "the striped block number 01" in caption
        assert "block" in caption
        assert "chosen mark: 1" in caption
        # the no-candidates sample gets a gt-only overlay and a miss note
        assert not (out / "s16_marked.png").exists()
        assert (out / "s16_overlay.png").exists()
        assert "miss" in (out / "s16.txt").read_text()

    def test_bogus_id_lists_available(self, golden_env, tmp_path, capsys):
        _, run_dir = do_run(golden_env, tmp_path, "full", "run")
        code = run_cli(
            "visualize", "--run-dir", run_dir, "--ids", "nope", "--out-dir", tmp_path / "viz"
        )
        assert code == 2
        err = capsys.readouterr().err
        assert "nope" in err and "s01" in err


class TestCmdSample:
    def test_materializes_seeded_subsample(self, golden_env, tmp_path, capsys):
        out = tmp_path / "sampled.jsonl"
        code = run_cli(
            "sample", "--manifest", golden_env.manifest_path, "--out", out, "--seed", 7
        )
        assert code == 0
        sampled = load_manifest(out)
        assert len(sampled) == 2  # ceil(0.1 * 20)
        again = tmp_path / "again.jsonl"
        run_cli("sample", "--manifest", golden_env.manifest_path, "--out", again, "--seed", 7)
        assert out.read_bytes() == again.read_bytes()

    def test_bad_ratio_exits_2(self, golden_env, tmp_path):
        code = run_cli(
            "sample",
            "--manifest", golden_env.manifest_path,
            "--out", tmp_path / "s.jsonl",
            "--ratio", "1.5",
        )
        assert code == 2


class TestCmdConvert:
    def test_xywh_records_canonicalized(self, tmp_path):
        src = tmp_path / "raw.json"
        src.write_text(
            json.dumps(
                [
                    {"question_id": 1, "file_name": "a.jpg", "sentence": "left mug", "bbox": [10, 20, 30, 40]},
                    {"question_id": 2, "file_name": "b.jpg", "sentence": "right mug", "bbox": [0, 0, 5, 5]},
                ]
            )
        )
        out = tmp_path / "canonical.jsonl"
        code = run_cli(
            "convert", "--input", src, "--out", out, "--bbox-format", "xywh",
            "--dataset", "custom", "--split", "val",
        )
        assert code == 0
        manifest = load_manifest(out)
        assert manifest.samples[0].gt_box.as_list() == [10.0, 20.0, 40.0, 60.0]
        assert manifest.samples[0].expression == "left mug"

    def test_invalid_record_exits_2(self, tmp_path, capsys):
        src = tmp_path / "raw.json"
        src.write_text(json.dumps([{"id": 1, "image": "a.jpg", "bbox": [1, 2, 3, 4]}]))
        code = run_cli("convert", "--input", src, "--out", tmp_path / "o.jsonl")
        assert code == 2
        assert "expression" in capsys.readouterr().err


class TestUsage:
    def test_no_command_exits_2(self, capsys):
        assert main([]) == 2

    def test_help_exits_0(self, capsys):
        assert main(["--help"]) == 0
