import json
import os
import subprocess
import sys

import pytest

from conftest import credential
from xufs import netsim
from xufs.bench import BenchReport, BenchRun, Scenario
from xufs.cli import UsageError, main, parse_script
from xufs.server import FileServer
from xufs.transport import TcpTransport
from xufs.vfs import Mount, MountConfig

PHRASE = b"correct horse battery"


@pytest.fixture
def env(tmp_path):
    root = tmp_path / "export"
    root.mkdir()
    (root / "hello.txt").write_bytes(b"hello world")
    (root / "src").mkdir()
    (root / "src" / "a.c").write_bytes(b"int a;")
    phrase = tmp_path / "phrase"
    phrase.write_bytes(PHRASE + b"\n")
    common = ["--key", "test", "--phrase-file", str(phrase)]
    return {"root": root, "cache": tmp_path / "cache", "common": common, "tmp": tmp_path}


def sim_mount(env, script, *extra, json_out=True):
    path = env["tmp"] / "script.txt"
    path.write_text(script)
    argv = (["--json"] if json_out else []) + ["--transport", "sim", "mount", "--root", str(env["root"]),
                                               "--cache", str(env["cache"]), "--script", str(path)]
    return main(argv + env["common"] + list(extra))


def test_parse_script_ok():
    steps = parse_script("# comment\nopendir /\nopen h hello.txt READ\n\nread h 5\nwrite h 'two words'\n")
    assert [(s.line, s.op, s.args) for s in steps] == [
        (2, "opendir", ["/"]), (3, "open", ["h", "hello.txt", "READ"]),
        (5, "read", ["h", "5"]), (6, "write", ["h", "two words"]),
    ]


@pytest.mark.parametrize("text", [
    "frobnicate x", "open h", "read h five", "open h f SIDEWAYS", "sleep soon", "write h 'unterminated",
    "sync now",
])
def test_parse_script_rejects(text):
    with pytest.raises(UsageError):
        parse_script(text)


def test_sim_mount_reads_file(env, capsys):
    rc = sim_mount(env, "opendir /\nopen h hello.txt\nread h\nclose h\nstat hello.txt\n")
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert [r["status"] for r in out["results"]] == ["OK"] * 5
    assert out["results"][2]["result"] == "hello world"
    assert out["results"][4]["result"]["size"] == 11
    assert out["queued"] == 0


def test_sim_mount_write_reaches_export(env, capsys):
    rc = sim_mount(env, "opendir /\nopen h new.txt WRITE CREATE\nwrite h abc\nclose h\n")
    assert rc == 0
    assert (env["root"] / "new.txt").read_bytes() == b"abc"


def test_failed_op_exits_one(env, capsys):
    rc = sim_mount(env, "opendir /\nopen h missing.txt\nstat hello.txt\n")
    assert rc == 1
    out = json.loads(capsys.readouterr().out)
    assert [r["status"] for r in out["results"]] == ["OK", "NOT_FOUND"]


def test_keep_going_runs_every_step(env, capsys):
    rc = sim_mount(env, "opendir /\nopen h missing.txt\nstat hello.txt\n", "--keep-going")
    assert rc == 1
    out = json.loads(capsys.readouterr().out)
    assert [r["status"] for r in out["results"]] == ["OK", "NOT_FOUND", "OK"]


def test_usage_errors_exit_two(env, capsys):
    assert sim_mount(env, "bogus op\n") == 2
    assert main(["mount", "--cache", "x"] + env["common"]) == 2  # no --export
    assert main(["--transport", "tcp", "mount", "--cache", "x", "--export", "e", "--partition",
                 "--script", os.devnull] + env["common"]) == 2
    assert main(["serve", "--root", str(env["root"])] + env["common"]) == 2  # no --listen
    assert main(["--transport", "sim", "mount", "--cache", "x", "--script", os.devnull]
                + env["common"]) == 2  # sim without --root
    assert main(["sync", "--cache", "x", "--export", "e"]) == 2  # no credential
    with pytest.raises(SystemExit) as ei:
        main(["nonsense"])
    assert ei.value.code == 2
    assert "error" in capsys.readouterr().err


def test_unreachable_server_exits_one(env, capsys):
    rc = main(["mount", "--server", "127.0.0.1:1", "--export", "e", "--cache", str(env["cache"]),
               "--script", os.devnull] + env["common"])
    assert rc == 1
    assert "UNREACHABLE" in capsys.readouterr().err


def test_config_file_supplies_defaults(env, capsys):
    cfg = env["tmp"] / "cfg.json"
    cfg.write_text(json.dumps({"transport": "sim", "root": str(env["root"]), "cache": str(env["cache"]),
                               "key": "test", "phrase-file": env["common"][3], "json": True}))
    script = env["tmp"] / "s.txt"
    script.write_text("opendir src\n")
    assert main(["--config", str(cfg), "mount", "--script", str(script)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["results"][0]["result"] == ["a.c"]


def test_bad_config_file(env, capsys):
    bad = env["tmp"] / "bad.json"
    bad.write_text("[1, 2]")
    with pytest.raises(SystemExit) as ei:
        main(["--config", str(bad), "mount"])
    assert ei.value.code == 2


def test_partition_queues_then_sync_drains(env, capsys):
    rc = sim_mount(env, "mkdir d\nopen h d/f WRITE CREATE\nwrite h queued\nclose h\n", "--partition")
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["queued"] == 3
    assert not (env["root"] / "d").exists()
    rc = main(["--json", "--transport", "sim", "sync", "--root", str(env["root"]), "--cache", str(env["cache"]),
               "--export", "export"] + env["common"])
    assert rc == 0
    rep = json.loads(capsys.readouterr().out)
    assert [(r["kind"], r["status"]) for r in rep["results"]] == [
        ("MKDIR", "OK"), ("CREATE", "OK"), ("FLUSH_SHADOW", "OK")]
    assert rep["remaining"] == 0
    assert (env["root"] / "d" / "f").read_bytes() == b"queued"


def test_sim_profile_file(env, capsys):
    prof = env["tmp"] / "wan.json"
    prof.write_text(json.dumps({"latency_ms": 250}))
    rc = sim_mount(env, "opendir /\n", "--seed", "3", json_out=False)
    assert rc == 0
    assert main(["--transport", "sim", "--sim-profile", str(prof), "mount", "--root", str(env["root"]),
                 "--cache", str(env["tmp"] / "c2"), "--script", str(env["tmp"] / "script.txt")]
                + env["common"]) == 0
    assert "queued ops: 0" in capsys.readouterr().out
    prof.write_text("{not json")
    assert main(["--transport", "sim", "--sim-profile", str(prof), "mount", "--root", str(env["root"]),
                 "--cache", str(env["cache"]), "--script", os.devnull] + env["common"]) == 2


def test_bench_report_json_round_trip():
    rep = BenchReport(Scenario.READ_THROUGHPUT, [
        BenchRun.measure(0, 0.5, 1 << 20, label="direct"),
        BenchRun.measure(1, 0.4, 1 << 20, label="xufs", logical_time=0.3, fetches=1),
    ], {"latency_ms": 40}, "sim", {"note": "x"})
    again = BenchReport.from_json(rep.to_json())
    assert again == rep
    assert json.loads(rep.to_json())["scenario"] == "READ_THROUGHPUT"


def test_bench_command_sim(env, capsys):
    rc = main(["--json", "--transport", "sim", "bench", "LARGE_FILE_REPEAT", "--large-size", "2", "--runs", "3",
               "--workdir", str(env["tmp"] / "bench")])
    assert rc == 0
    reports = [BenchReport.from_dict(d) for d in json.loads(capsys.readouterr().out)]
    assert reports[0].scenario == Scenario.LARGE_FILE_REPEAT
    assert len(reports[0].runs) >= 3


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "xufs.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("serve", "mount", "sync", "bench"):
        assert cmd in r.stdout


def test_tcp_loopback_end_to_end(tmp_path):
    root = tmp_path / "export"
    root.mkdir()
    (root / "f").write_bytes(b"over tcp")
    cred = credential()

    async def main_():
        server = FileServer(str(root), cred, export_id="home", poll_interval=None)
        listener = await server.start(TcpTransport("server"), "127.0.0.1:0")
        port = listener.sockets[0].getsockname()[1]
        cfg = MountConfig(f"127.0.0.1:{port}", "home", str(tmp_path / "cache"), client_id="A")
        m = await Mount(cfg, TcpTransport("client"), cred).start()
        try:
            await m.opendir("")
            assert m.stat("f").size == 8
            h = await m.open("f", "READWRITE")
            assert m.read(h) == b"over tcp"
            m.write(h, b"!")
            m.close(h)
            rep = await m.sync()
            assert [r.status for r in rep.results] == ["OK"]
        finally:
            await m.unmount()
            await server.stop()

    netsim.run(main_(), virtual=False)
    assert (root / "f").read_bytes() == b"over tcp!"


def test_serve_command_over_tcp(env, tmp_path):
    proc = subprocess.Popen([sys.executable, "-m", "xufs.cli", "serve", "--root", str(env["root"]),
                             "--listen", "127.0.0.1:0", "--poll-interval", "0"] + env["common"],
                            stdout=subprocess.PIPE, text=True)
    try:
        line = proc.stdout.readline()
        assert line.startswith("serving export on 127.0.0.1:")
        port = line.rsplit(":", 1)[1].strip()
        script = tmp_path / "s.txt"
        script.write_text("opendir /\nopen h hello.txt\nread h\n")
        r = subprocess.run([sys.executable, "-m", "xufs.cli", "--json", "mount", "--server", f"127.0.0.1:{port}",
                            "--export", "export", "--cache", str(tmp_path / "c"), "--script", str(script)]
                           + env["common"], capture_output=True, text=True, timeout=30)
        assert r.returncode == 0, r.stderr
        assert json.loads(r.stdout)["results"][2]["result"] == "hello world"
    finally:
        proc.terminate()
        assert proc.wait(timeout=10) == 0
