import json
import os
import threading

import numpy as np
import pytest

from inferix import protocol
from inferix.cli import main
from inferix.metrics import read_frame, write_frame
from inferix.server import StreamClient, parse_endpoint


SMALL = """\
[model]
layers = 1
heads = 2
head_dim = 4
block_len = 4
frame_height = 8
frame_width = 8
prompt_dim = 8

[bd-engine]
num_blocks = 2
steps = 1.0,0.5
seed = 5
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(SMALL)
    return str(path)


def frame_files(out_dir):
    return sorted(f for f in os.listdir(out_dir) if f.endswith(".frame"))


class TestGenerate:
    def test_writes_frames_and_resolved_config(self, config, tmp_path):
        out = str(tmp_path / "out")
        assert main(["--config", config, "--out", out, "generate"]) == 0
        assert len(frame_files(out)) == 2 * 4  # num_blocks * block_len
        assert os.path.exists(os.path.join(out, "resolved.ini"))

    def test_rerun_from_resolved_config_bit_identical(self, config, tmp_path):
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        assert main(["--config", config, "--out", out1, "generate"]) == 0
        resolved = os.path.join(out1, "resolved.ini")
        assert main(["--config", resolved, "--out", out2, "generate"]) == 0
        names = frame_files(out1)
        assert names == frame_files(out2)
        for n in names:
            a = open(os.path.join(out1, n), "rb").read()
            b = open(os.path.join(out2, n), "rb").read()
            assert a == b

    def test_seed_flag_overrides(self, config, tmp_path):
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        main(["--config", config, "--out", out1, "generate"])
        main(["--config", config, "--out", out2, "--seed", "9", "generate"])
        n = frame_files(out1)[0]
        assert (open(os.path.join(out1, n), "rb").read()
                != open(os.path.join(out2, n), "rb").read())

    def test_verify_flag(self, config, tmp_path, capsys):
        out = str(tmp_path / "out")
        assert main(["--config", config, "--out", out, "generate",
                     "--verify"]) == 0
        assert "max latent diff" in capsys.readouterr().out

    def test_invalid_schedule_exit_2(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text(SMALL.replace("steps = 1.0,0.5", "steps = 0.5,1.0"))
        assert main(["--config", str(path), "--out",
                     str(tmp_path / "out"), "generate"]) == 2

    def test_unknown_key_exit_2(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text(SMALL + "\ntypo_key = 1\n")
        assert main(["--config", str(path), "generate"]) == 2

    def test_missing_config_exit_2(self, tmp_path):
        assert main(["--config", str(tmp_path / "nope.ini"), "generate"]) == 2

    def test_profiler_report_written(self, config, tmp_path):
        cfg = tmp_path / "prof.ini"
        cfg.write_text(SMALL + "\n[profiler]\nenabled = true\n")
        out = str(tmp_path / "out")
        assert main(["--config", str(cfg), "--out", out, "generate"]) == 0
        report = open(os.path.join(out, "profile.txt")).read()
        assert report.startswith("# inferix-profile v1")
        assert "generate_block" in report

    def test_parallel_strategy_selected(self, config, tmp_path, capsys):
        cfg = tmp_path / "par.ini"
        cfg.write_text(SMALL + "\n[parallel-sim]\nworld_size = 2\n")
        out = str(tmp_path / "out")
        assert main(["--config", str(cfg), "--out", out, "generate"]) == 0
        printed = capsys.readouterr().out
        assert "parallel strategy:" in printed
        resolved = open(os.path.join(out, "resolved.ini")).read()
        assert "strategy = ring_pass" in resolved or "strategy = ulysses" in resolved

    def test_env_override_seed(self, config, tmp_path, monkeypatch):
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        main(["--config", config, "--out", out1, "generate"])
        monkeypatch.setenv("INFERIX_SEED", "77")
        main(["--config", config, "--out", out2, "generate"])
        n = frame_files(out1)[0]
        assert (open(os.path.join(out1, n), "rb").read()
                != open(os.path.join(out2, n), "rb").read())


class TestEval:
    def test_missing_dir_exit_2(self, tmp_path):
        assert main(["eval", str(tmp_path / "nope")]) == 2

    def test_identical_chunks_all_zero(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        chunk = [rng.integers(0, 256, (8, 8)).astype(np.uint8) for _ in range(2)]
        d = tmp_path / "vid"
        d.mkdir()
        for i, frame in enumerate(chunk * 3):
            write_frame(d / f"f_{i:03d}.frame", frame)
        assert main(["eval", str(d), "--chunk-len", "2"]) == 0
        out = capsys.readouterr().out
        for line in out.strip().splitlines():
            name, value = line.split("\t")
            assert float(value) == pytest.approx(0.0, abs=1e-9), name
        data = json.loads((d / "vde_report.json").read_text())
        assert data["vde_clarity"] == pytest.approx(0.0, abs=1e-9)

    def test_engine_output_evaluates(self, config, tmp_path, capsys):
        out = str(tmp_path / "out")
        main(["--config", config, "--out", out, "generate"])
        assert main(["eval", out, "--chunk-len", "4"]) == 0
        assert os.path.exists(os.path.join(out, "vde_report.txt"))


class TestServe:
    def test_loopback_stream(self, config, tmp_path, capsys):
        rc = {}

        def run():
            rc["code"] = main(["--config", config, "serve",
                               "--listen", "127.0.0.1:0"])

        t = threading.Thread(target=run)
        t.start()
        # wait for the listening line
        import time
        deadline = time.monotonic() + 10
        addr = None
        while time.monotonic() < deadline and addr is None:
            out = capsys.readouterr().out
            for line in out.splitlines():
                if line.startswith("listening on "):
                    addr = parse_endpoint(line.split()[-1])
            time.sleep(0.01)
        assert addr is not None
        client = StreamClient(*addr)
        msgs = [client.recv()]
        msgs.extend(client.messages_until_end())
        t.join(timeout=10)
        assert rc["code"] == 0
        kinds = [m.kind for m in msgs]
        assert kinds[0] == protocol.HELLO
        assert kinds[-1] == protocol.END
        assert kinds.count(protocol.FRAME) == 2 * 4
        client.close()

    def test_port_conflict_clean_error(self, config, tmp_path, capsys):
        import socket

        holder = socket.create_server(("127.0.0.1", 0))
        port = holder.getsockname()[1]
        try:
            rc = main(["--config", config, "serve",
                       "--listen", f"127.0.0.1:{port}"])
            assert rc == 1
            assert "bind failed" in capsys.readouterr().err
        finally:
            holder.close()


class TestProfileOverhead:
    def test_disabled_ratio_near_one(self, capsys):
        assert main(["profile-overhead", "--disabled"]) == 0
        out = capsys.readouterr().out
        ratio = float(out.split(":")[1])
        assert ratio <= 1.01

    def test_heavy_hook_exits_1_with_explanation(self, capsys):
        rc = main(["profile-overhead", "--heavy-hook", "--attempts", "1"])
        captured = capsys.readouterr()
        assert rc == 1
        assert "hooks" in captured.err


class TestParser:
    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["--help"])
        assert e.value.code == 0
        for sub in ("generate", "serve", "eval", "profile-overhead"):
            with pytest.raises(SystemExit) as e:
                main([sub, "--help"])
            assert e.value.code == 0
            capsys.readouterr()
