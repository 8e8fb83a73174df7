"""Command-line entry points: ``serve``, ``mount``, ``sync`` and ``bench``.

Exit codes: 0 success, 1 operation failure, 2 usage error.

``mount`` runs an operation script, one operation per line::

    opendir /
    open h a.txt READ
    read h 3
    close h

With ``--transport sim`` the server runs in-process over ``--root`` on a
simulated link, which makes ``--partition`` and ``--sim-profile`` usable
without a network.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import shlex
import signal
import sys
import time
from dataclasses import dataclass
from typing import Any

from . import netsim
from .bench import BenchEnv, Scenario, run_scenario
from .errors import ErrorCode, XufsError
from .netsim import LinkProfile, SimNetwork
from .server import FileServer
from .transport import TcpTransport
from .vfs import Mount, MountConfig, OpenMode
from .vfs import sync as vfs_sync
from .wire import AuthCredential

log = logging.getLogger("xufs")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# -- scripts ----------------------------------------------------------------

# op -> (min args, max args)
SCRIPT_OPS = {
    "opendir": (1, 1), "chdir": (1, 1), "stat": (1, 1),
    "open": (2, 5), "read": (1, 2), "write": (2, 2), "seek": (2, 2), "close": (1, 1),
    "mkdir": (1, 1), "unlink": (1, 1), "rmdir": (1, 1), "rename": (2, 2), "truncate": (2, 2),
    "lock": (2, 3), "unlock": (1, 1), "sleep": (1, 1), "sync": (0, 0),
}


@dataclass
class ScriptStep:
    line: int
    op: str
    args: list[str]


def parse_script(text: str) -> list[ScriptStep]:
    steps = []
    for n, raw in enumerate(text.splitlines(), 1):
        try:
            words = shlex.split(raw, comments=True)
        except ValueError as exc:
            raise UsageError(f"line {n}: {exc}") from None
        if not words:
            continue
        op, args = words[0].lower(), words[1:]
        if op not in SCRIPT_OPS:
            raise UsageError(f"line {n}: unknown operation {op!r}")
        lo, hi = SCRIPT_OPS[op]
        if not lo <= len(args) <= hi:
            raise UsageError(f"line {n}: {op} takes {lo}..{hi} arguments, got {len(args)}")
        if op == "open":
            for flag in args[2:]:
                if flag.upper() not in ("READ", "WRITE", "READWRITE", "CREATE", "TRUNC"):
                    raise UsageError(f"line {n}: unknown open flag {flag!r}")
        if op in ("read", "seek", "truncate") and len(args) > 1 and not args[1].isdigit():
            raise UsageError(f"line {n}: {op} needs a non-negative integer")
        if op == "sleep":
            try:
                float(args[0])
            except ValueError:
                raise UsageError(f"line {n}: sleep needs seconds") from None
        steps.append(ScriptStep(n, op, args))
    return steps


async def run_script(m: Mount, steps: list[ScriptStep], keep_going: bool = False) -> list[dict[str, Any]]:
    handles: dict[str, Any] = {}
    locks: dict[str, Any] = {}
    results = []

    def handle(name):
        if name not in handles:
            raise XufsError(ErrorCode.BAD_HANDLE, f"no open handle {name!r}")
        return handles[name]

    for st in steps:
        a = st.args
        out: Any = None
        try:
            if st.op == "opendir":
                out = [e.name for e in await m.opendir(a[0])]
            elif st.op == "chdir":
                r = await m.chdir(a[0])
                out = {"fetched": r.fetched, "failed": r.failed}
            elif st.op == "stat":
                out = m.stat(a[0]).to_wire()
            elif st.op == "open":
                flags = {f.upper() for f in a[2:]}
                mode = next((f for f in ("READWRITE", "WRITE", "READ") if f in flags), "READ")
                handles[a[0]] = await m.open(a[1], OpenMode(mode), create="CREATE" in flags,
                                             truncate="TRUNC" in flags)
            elif st.op == "read":
                data = m.read(handle(a[0]), int(a[1]) if len(a) > 1 else -1)
                out = data.decode("utf-8", "backslashreplace")
            elif st.op == "write":
                out = m.write(handle(a[0]), a[1].encode())
            elif st.op == "seek":
                out = m.seek(handle(a[0]), int(a[1]))
            elif st.op == "close":
                m.close(handles.pop(a[0]) if a[0] in handles else handle(a[0]))
            elif st.op == "mkdir":
                m.mkdir(a[0])
            elif st.op == "unlink":
                m.unlink(a[0])
            elif st.op == "rmdir":
                m.rmdir(a[0])
            elif st.op == "rename":
                m.rename(a[0], a[1])
            elif st.op == "truncate":
                m.truncate(a[0], int(a[1]))
            elif st.op == "lock":
                locks[a[0]] = await m.lock(a[1], a[2].upper() if len(a) > 2 else "EXCLUSIVE")
                out = locks[a[0]].lock_id
            elif st.op == "unlock":
                if a[0] not in locks:
                    raise XufsError(ErrorCode.BAD_HANDLE, f"no lock {a[0]!r}")
                await m.unlock(locks.pop(a[0]))
            elif st.op == "sleep":
                await asyncio.sleep(float(a[0]))
            elif st.op == "sync":
                rep = await m.sync()
                out = rep.to_dict()
            results.append({"line": st.line, "op": st.op, "args": a, "status": "OK", "result": out})
        except XufsError as exc:
            results.append({"line": st.line, "op": st.op, "args": a, "status": exc.code.value,
                            "message": exc.message})
            if not keep_going:
                break
    for h in handles.values():
        m.close(h)
    return results


# -- helpers ----------------------------------------------------------------


def load_credential(args) -> AuthCredential:
    if not args.key or not args.phrase_file:
        raise UsageError("--key and --phrase-file are required")
    try:
        with open(args.phrase_file, "rb") as f:
            phrase = f.read().strip()
    except OSError as exc:
        raise UsageError(f"cannot read phrase file: {exc}") from None
    if not phrase:
        raise UsageError("phrase file is empty")
    return AuthCredential(args.key, phrase, time.time() + args.credential_ttl)


def load_profile(args) -> LinkProfile:
    if args.sim_profile:
        try:
            return LinkProfile.from_json(args.sim_profile)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"bad sim profile: {exc}") from None
    return LinkProfile()


def mount_knobs(args) -> dict[str, Any]:
    names = ("backoff_initial", "backoff_cap", "renew_retry", "prefetch_threshold", "prefetch_parallelism")
    return {k: getattr(args, k) for k in names if getattr(args, k, None) is not None}


def emit(args, payload: Any, text: str) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True, default=str))
    else:
        print(text)


def _serve_knob(args, name: str, env: str, default: float | None) -> float | None:
    v = getattr(args, name)
    if v is not None:
        return v
    if env in os.environ:
        return float(os.environ[env])
    return default


def _make_server(args, credential, clock=None) -> FileServer:
    poll = _serve_knob(args, "poll_interval", "XUFS_POLL_INTERVAL", 2.0)
    term = _serve_knob(args, "lease_term", "XUFS_LEASE_TERM", 30.0)
    return FileServer(args.root, credential, export_id=getattr(args, "export", None) or None,
                      lease_term=term, poll_interval=poll or None, clock=clock)


# -- commands ---------------------------------------------------------------


def cmd_serve(args) -> int:
    if args.transport == "sim":
        raise UsageError("serve needs --transport tcp (a simulated server only lives inside mount/sync/bench)")
    if not args.root or not args.listen:
        raise UsageError("serve needs --root and --listen")
    cred = load_credential(args)

    async def main():
        server = _make_server(args, cred)
        listener = await server.start(TcpTransport("server"), args.listen)
        addr = listener.sockets[0].getsockname()
        log.info("serving %s as %r on %s:%s", server.root, server.export_id, addr[0], addr[1])
        print(f"serving {server.export_id} on {addr[0]}:{addr[1]}", flush=True)
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        await stop.wait()
        await server.stop()

    asyncio.run(main())
    return EXIT_OK


async def _with_mount(args, body, *, need_root_for_sim: bool = True):
    """Run ``body(mount, net)`` against TCP or an in-process simulated server."""
    cred = load_credential(args)
    knobs = mount_knobs(args)
    if args.transport == "sim":
        if not args.root:
            raise UsageError("--transport sim needs --root (the export served in-process)")
        loop = asyncio.get_running_loop()
        net = SimNetwork(load_profile(args), args.seed)
        server = _make_server(args, cred, clock=loop.time)
        server.poll_interval = None
        await server.start(net.transport("server"), "sim:1")
        cfg = MountConfig("sim:1", args.export or server.export_id, args.cache, args.localized or [])
        transport = net.transport("client")
    else:
        if not args.server:
            raise UsageError("--server HOST:PORT is required with --transport tcp")
        net = server = None
        cfg = MountConfig(args.server, args.export, args.cache, args.localized or [])
        transport = TcpTransport("client")
    # explicit options beat XUFS_* environment variables
    cfg.with_env()
    for k, v in knobs.items():
        setattr(cfg, k, v)
    m = Mount(cfg, transport, cred)
    try:
        await m.start()
        return await body(m, net)
    finally:
        if server is not None:
            await server.stop()


def cmd_mount(args) -> int:
    if not args.cache or not (args.export or args.transport == "sim"):
        raise UsageError("mount needs --cache and --export")
    if args.script in (None, "-"):
        text = sys.stdin.read()
    else:
        try:
            with open(args.script) as f:
                text = f.read()
        except OSError as exc:
            raise UsageError(f"cannot read script: {exc}") from None
    steps = parse_script(text)
    if args.partition and args.transport != "sim":
        raise UsageError("--partition needs --transport sim")

    async def body(m: Mount, net):
        if args.partition:
            if m.connected:
                await m.opendir("/")
            net.set_partition(True)
        results = await run_script(m, steps, args.keep_going)
        queued = len(m.cache.queue.pending)
        await m.unmount(drain=not args.partition)
        return results, queued

    results, queued = _run(args, _with_mount(args, body))
    ok = all(r["status"] == "OK" for r in results) and len(results) == len(steps)
    lines = []
    for r in results:
        shown = "" if r.get("result") is None else f" -> {r['result']!r}"
        msg = f" ({r['message']})" if r.get("message") else ""
        lines.append(f"{r['status']:<18} {r['op']} {' '.join(r['args'])}{shown}{msg}")
    lines.append(f"queued ops: {queued}")
    emit(args, {"results": results, "queued": queued}, "\n".join(lines))
    if ok or args.keep_going:
        return EXIT_OK if ok else EXIT_FAIL
    return EXIT_FAIL


def cmd_sync(args) -> int:
    if not args.cache or not args.export:
        raise UsageError("sync needs --cache and --export")
    cred = load_credential(args)

    async def main():
        if args.transport == "tcp":
            return await vfs_sync(args.cache, args.export, transport=TcpTransport("client"),
                                  credential=cred, server_addr=args.server)

        async def body(m: Mount, net):
            try:
                return await m.sync()
            finally:
                await m.unmount(drain=False)

        return await _with_mount(args, body)

    try:
        report = _run(args, main())
    except XufsError as exc:
        emit(args, {"error": exc.code.value, "message": exc.message}, f"sync failed: {exc}")
        return EXIT_FAIL
    lines = [f"{r.status:<14} #{r.op_id} {r.kind} {r.target}" + (f" (overwrote v{r.overwrote})"
             if r.overwrote is not None else "") for r in report.results]
    lines.append(f"remaining: {report.remaining}")
    emit(args, report.to_dict(), "\n".join(lines))
    return EXIT_OK if report.drained else EXIT_FAIL


def cmd_bench(args) -> int:
    scenarios = list(Scenario) if args.scenario == "ALL" else [Scenario(args.scenario)]
    profile = load_profile(args)
    mode = "sim" if args.transport == "sim" else "tcp"

    async def main():
        reports = []
        for sc in scenarios:
            kw: dict[str, Any] = {}
            if sc in (Scenario.WRITE_THROUGHPUT, Scenario.READ_THROUGHPUT):
                kw["sizes_mib"] = args.sizes
            if sc == Scenario.LARGE_FILE_REPEAT:
                kw["size"] = args.large_size * 1024 * 1024
                kw["runs"] = args.runs
            async with BenchEnv(args.workdir, mode, profile, args.seed) as env:
                reports.append(await run_scenario(sc, env, **kw))
        return reports

    reports = _run(args, main(), virtual=(mode == "sim"))
    emit(args, [r.to_dict() for r in reports], "\n\n".join(r.table() for r in reports))
    return EXIT_OK


def _run(args, coro, virtual: bool | None = None):
    if virtual is None:
        virtual = args.transport == "sim"
    return netsim.run(coro, virtual=virtual)


# -- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xufs", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="JSON file with default option values")
    p.add_argument("--transport", choices=("tcp", "sim"), default=None)
    p.add_argument("--sim-profile", help="JSON link profile for --transport sim")
    p.add_argument("--json", action="store_true", default=None, help="machine-readable output")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def auth(sp):
        sp.add_argument("--key", help="credential key name")
        sp.add_argument("--phrase-file", help="file holding the shared secret phrase")
        sp.add_argument("--credential-ttl", type=float, default=None, help="seconds the credential stays valid")

    def client(sp):
        sp.add_argument("--server", help="HOST:PORT of the file server")
        sp.add_argument("--export", help="export id")
        sp.add_argument("--cache", help="cache root directory")
        sp.add_argument("--root", help="export root served in-process (sim transport)")
        sp.add_argument("--localized", action="append", help="localized directory (repeatable)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--backoff-initial", type=float)
        sp.add_argument("--backoff-cap", type=float)
        sp.add_argument("--renew-retry", type=float)
        sp.add_argument("--prefetch-threshold", type=int)
        sp.add_argument("--prefetch-parallelism", type=int)
        sp.add_argument("--poll-interval", type=float)
        sp.add_argument("--lease-term", type=float)

    s = sub.add_parser("serve", help="run a file server")
    s.add_argument("--root", help="directory to export")
    s.add_argument("--listen", help="HOST:PORT to listen on")
    s.add_argument("--export", help="export id (default: root basename)")
    s.add_argument("--poll-interval", type=float, help="seconds between local change scans (0 disables)")
    s.add_argument("--lease-term", type=float, help="lock lease term in seconds")
    auth(s)
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("mount", help="mount an export and run an operation script")
    client(s)
    auth(s)
    s.add_argument("--script", help="operation script file ('-' or omitted: stdin)")
    s.add_argument("--keep-going", action="store_true", default=None)
    s.add_argument("--partition", action="store_true", default=None,
                   help="partition the simulated link before running the script")
    s.set_defaults(func=cmd_mount)

    s = sub.add_parser("sync", help="replay queued operations of a cache space")
    client(s)
    auth(s)
    s.set_defaults(func=cmd_sync)

    s = sub.add_parser("bench", help="run a benchmark scenario")
    s.add_argument("scenario", choices=[sc.value for sc in Scenario] + ["ALL"])
    s.add_argument("--sizes", type=int, nargs="+", help="file sizes in MiB")
    s.add_argument("--large-size", type=int, help="large-file size in MiB")
    s.add_argument("--runs", type=int, help="scans for LARGE_FILE_REPEAT")
    s.add_argument("--workdir", help="scratch directory (default: a temporary one)")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_bench)
    return p


DEFAULTS = {
    "json": False,
    "credential_ttl": 86400.0,
    "keep_going": False,
    "partition": False,
    "seed": 0,
    "sizes": [1, 4, 16, 64, 256, 1024],
    "large_size": 1024,
    "runs": 5,
}


def resolve(args, parser) -> argparse.Namespace:
    """Fill unset options from ``--config`` and then from built-in defaults."""
    cfg: dict[str, Any] = {}
    if args.config:
        try:
            with open(args.config) as f:
                cfg = json.load(f)
        except (OSError, ValueError) as exc:
            parser.error(f"bad --config: {exc}")
        if not isinstance(cfg, dict):
            parser.error("--config must hold a JSON object")
    for key, value in cfg.items():
        key = key.replace("-", "_")
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    for key, value in DEFAULTS.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    if args.transport is None:
        args.transport = "sim" if args.command == "bench" else "tcp"
    return args


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args = resolve(args, parser)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"xufs: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except XufsError as exc:
        print(f"xufs: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
