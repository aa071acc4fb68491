import os

import numpy as np
import pytest

from eva.checkpoint import save_checkpoint
from eva.cli import main
from eva.config import ENCODER_PROFILES
from eva.events import (SensorGeometry, make_events, read_binary_file,
                        synth_generate, write_binary_file, write_csv)
from eva.params import init_encoder_params
from eva.snapshots import KIND_EC, read_snapshot
from eva.targets import event_count


@pytest.fixture()
def small_ckpt(tmp_path):
    cfg = ENCODER_PROFILES["small"]
    params = init_encoder_params(cfg, seed=0)
    path = tmp_path / "model.evaw"
    save_checkpoint(path, params)
    return str(path)


def test_convert_roundtrip(tmp_path):
    geom = SensorGeometry(32, 32, 16)
    ev = synth_generate("uniform_noise", geom, 50_000, 2000.0, seed=0)
    ev["t"] -= ev["t"][0]
    csv_path = tmp_path / "events.csv"
    with open(csv_path, "w") as fh:
        write_csv(ev, fh)
    bin_path = tmp_path / "events.evt"
    assert main(["convert", str(csv_path), str(bin_path), "--geometry", "32x32"]) == 0
    back, geom2 = read_binary_file(bin_path)
    assert np.array_equal(back, ev)
    csv2 = tmp_path / "events2.csv"
    assert main(["convert", str(bin_path), str(csv2)]) == 0
    assert csv2.read_text() == csv_path.read_text()


def test_filter_cli(tmp_path):
    geom = SensorGeometry(8, 8, 8)
    hot = make_events(np.linspace(0, 9000, 50).astype(int), [3] * 50, [3] * 50, [1] * 50)
    src = tmp_path / "in.evt"
    dst = tmp_path / "out.evt"
    write_binary_file(src, hot, geom)
    assert main(["filter", str(src), str(dst), "--threshold", "40"]) == 0
    kept, _ = read_binary_file(dst)
    assert len(kept) == 0


def test_oracle_cli(tmp_path):
    geom = SensorGeometry(16, 16, 16)
    ev = synth_generate("moving_bar", geom, 100_000, 5000.0, seed=1)
    ev["t"] -= ev["t"][0]
    src = tmp_path / "in.evt"
    write_binary_file(src, ev, geom)
    out = tmp_path / "target.evar"
    assert main(["oracle", "--input", str(src), "--out", str(out), "--kind", "ec",
                 "--patch", "16", "--window-us", "50000"]) == 0
    snap = read_snapshot(out)
    assert snap.kind == KIND_EC
    t_ref = int(ev["t"][-1])
    want = event_count(ev, t_ref - 50_000, t_ref, 16).values
    assert np.array_equal(snap.values, want.astype(np.float32))


def test_inspect_cli(capsys):
    assert main(["inspect", "--profile", "dvs"]) == 0
    out = capsys.readouterr().out
    assert "params.total = 669696" in out
    assert "macs.total" in out


def test_encode_cli(tmp_path, small_ckpt):
    geom = SensorGeometry(16, 16, 16)
    ev = synth_generate("moving_dot", geom, 60_000, 2000.0, seed=2)
    ev["t"] -= ev["t"][0]
    src = tmp_path / "in.evt"
    write_binary_file(src, ev, geom)
    out_dir = tmp_path / "snaps"
    assert main(["encode", "--checkpoint", small_ckpt, "--input", str(src),
                 "--out", str(out_dir), "--period-us", "20000"]) == 0
    files = sorted(os.listdir(out_dir))
    assert len(files) >= 3
    snap = read_snapshot(out_dir / files[-1])
    assert snap.values.shape == (2, 16, 16)


def test_bench_cli(capsys, small_ckpt):
    assert main(["bench", "--checkpoint", small_ckpt, "--geometry", "16x16",
                 "--rate", "2000", "--duration-us", "200000"]) == 0
    out = capsys.readouterr().out
    assert "events_per_sec" in out and "decile_ratio" in out


def test_pretrain_cli(tmp_path):
    run = tmp_path / "run"
    assert main(["pretrain", "--out", str(run), "--profile", "tiny",
                 "--train-profile", "small", "--steps", "2", "--rate", "60000",
                 "--duration-us", "1500000", "--seed", "3"]) == 0
    assert (run / "losses.csv").exists()
    assert (run / "final.evaw").exists()


def test_precision_env_override(tmp_path, monkeypatch, small_ckpt):
    from eva.checkpoint import load_checkpoint
    params, _, _ = load_checkpoint(small_ckpt)
    assert params.dtype == np.float64  # profile default
    params32, _, _ = load_checkpoint(small_ckpt, precision="f32")
    assert params32.dtype == np.float32


def test_serve_cli_subprocess(tmp_path, small_ckpt):
    import signal
    import socket
    import subprocess
    import sys
    import time

    from eva.server import EvaClient

    # grab a free port, then hand it to the server process
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()

    proc = subprocess.Popen(
        [sys.executable, "-m", "eva.cli", "serve", "--checkpoint", small_ckpt,
         "--geometry", "32x32", "--listen", f"127.0.0.1:{port}"],
        stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True)
    try:
        deadline = time.time() + 15
        client = None
        while time.time() < deadline:
            try:
                client = EvaClient("127.0.0.1", port, timeout=5)
                break
            except OSError:
                time.sleep(0.1)
        assert client is not None, "server did not come up"
        rec = np.array([[7, 1, 1, 1]], dtype="<u2").tobytes()
        assert client.ingest_records(rec) == (1, 0)
        snap = client.snapshot()
        assert snap.patch_watermarks[0, 0] == 7
        client.close()
    finally:
        proc.send_signal(signal.SIGTERM)
        try:
            proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            proc.kill()
            raise
    assert proc.returncode == 0
