"""Benchmark scenarios shaped after the read/write, build and large-file runs.

Every scenario runs against a real server and mount. In ``sim`` mode the
network is simulated under the virtual clock, so ``logical_time`` is exact
and reproducible; ``wall_time`` is always measured with a real clock and is
what the ``throughput`` column reports. In ``tcp`` mode both clocks are the
wall clock over loopback.
"""

from __future__ import annotations

import asyncio
import enum
import hashlib
import json
import os
import random
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, field
from typing import Any

from .cache import EntryState
from .netsim import LinkProfile, SimNetwork
from .server import FileServer
from .transport import TcpTransport
from .vfs import Mount, MountConfig
from .wire import AuthCredential

MiB = 1024 * 1024
DEFAULT_SIZES_MIB = (1, 4, 16, 64, 256, 1024)
SCAN_CHUNK = 8 * MiB


class Scenario(str, enum.Enum):
    WRITE_THROUGHPUT = "WRITE_THROUGHPUT"
    READ_THROUGHPUT = "READ_THROUGHPUT"
    TREE_WALK_BUILD = "TREE_WALK_BUILD"
    LARGE_FILE_REPEAT = "LARGE_FILE_REPEAT"


@dataclass
class BenchRun:
    run_index: int
    wall_time: float
    bytes: int
    throughput: float
    label: str = ""
    logical_time: float | None = None
    fetches: int | None = None

    @classmethod
    def measure(cls, run_index: int, wall_time: float, nbytes: int, **kw) -> "BenchRun":
        tput = nbytes / wall_time if wall_time > 0 else float("inf")
        return cls(run_index, wall_time, nbytes, tput, **kw)


@dataclass
class BenchReport:
    scenario: Scenario
    runs: list[BenchRun] = field(default_factory=list)
    profile: dict[str, Any] | None = None
    mode: str = "sim"
    notes: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["scenario"] = self.scenario.value
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BenchReport":
        runs = [BenchRun(**r) for r in d.get("runs", ())]
        return cls(Scenario(d["scenario"]), runs, d.get("profile"), d.get("mode", "sim"), d.get("notes", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "BenchReport":
        return cls.from_dict(json.loads(s))

    def table(self) -> str:
        lines = [f"{self.scenario.value} ({self.mode})"]
        lines.append(f"{'run':>4}  {'label':<14}{'bytes':>14}{'wall s':>10}{'MiB/s':>10}"
                     f"{'logical s':>11}{'fetches':>9}")
        for r in self.runs:
            logical = "" if r.logical_time is None else f"{r.logical_time:.3f}"
            fetches = "" if r.fetches is None else str(r.fetches)
            mibs = r.throughput / MiB if r.throughput != float("inf") else float("inf")
            lines.append(
                f"{r.run_index:>4}  {r.label:<14}{r.bytes:>14}{r.wall_time:>10.4f}{mibs:>10.1f}"
                f"{logical:>11}{fetches:>9}"
            )
        for k, v in sorted(self.notes.items()):
            lines.append(f"  {k}: {v}")
        return "\n".join(lines)


# -- fixtures ---------------------------------------------------------------


def write_random_file(path: str, size: int, seed: int = 0, chunk: int = 64 * MiB) -> str:
    """Write ``size`` seeded pseudo-random bytes; return their sha256."""
    rng = random.Random(seed)
    h = hashlib.sha256()
    with open(path, "wb") as f:
        left = size
        while left:
            n = min(chunk, left)
            data = rng.randbytes(n)
            h.update(data)
            f.write(data)
            left -= n
    return h.hexdigest()


def make_source_tree(root: str, seed: int = 0) -> list[str]:
    """24 source-like files (about 12 000 lines) spread over 5 subdirectories."""
    rng = random.Random(seed)
    subdirs = ["include", "lib", "src", "src/util", "tests"]
    paths = []
    for i in range(24):
        d = subdirs[i % len(subdirs)]
        os.makedirs(os.path.join(root, d), exist_ok=True)
        rel = f"{d}/unit{i:02d}.c"
        n_lines = 400 + rng.randrange(200)
        body = "".join(
            f"static int fn_{i}_{j}(int x) {{ return x * {rng.randrange(1000)} + {j}; }}\n"
            for j in range(n_lines)
        )
        with open(os.path.join(root, rel), "w") as f:
            f.write(body)
        paths.append(rel)
    return paths


def scan_lines(read_chunk) -> tuple[int, int]:
    """Count newlines through ``read_chunk(n) -> bytes``; return (lines, bytes)."""
    lines = total = 0
    while True:
        data = read_chunk(SCAN_CHUNK)
        if not data:
            return lines, total
        lines += data.count(b"\n")
        total += len(data)


def local_scan(path: str) -> tuple[int, int]:
    fd = os.open(path, os.O_RDONLY)
    pos = 0
    try:
        def chunk(n):
            nonlocal pos
            data = os.pread(fd, n, pos)
            pos += len(data)
            return data
        return scan_lines(chunk)
    finally:
        os.close(fd)


async def mount_scan(m: Mount, rel: str) -> tuple[int, int]:
    h = await m.open(rel)
    try:
        return scan_lines(h.read)
    finally:
        m.close(h)


# -- environment ------------------------------------------------------------


class BenchEnv:
    """A server plus one mounted client over sim or loopback TCP."""

    def __init__(self, workdir: str | None = None, mode: str = "sim", profile: LinkProfile | None = None,
                 seed: int = 0, localized: tuple[str, ...] = (), **knobs):
        self.mode = mode
        self.profile = profile or LinkProfile()
        self.seed = seed
        self.localized = localized
        self.knobs = knobs
        self._own_dir = workdir is None
        self.workdir = workdir or tempfile.mkdtemp(prefix="xufs-bench-")
        self.export = os.path.join(self.workdir, "export")
        self.cache_root = os.path.join(self.workdir, "cache")
        os.makedirs(self.export, exist_ok=True)
        self.credential = AuthCredential("bench", os.urandom(16), time.time() + 86400)
        self.net: SimNetwork | None = None
        self.server: FileServer | None = None
        self.mount: Mount | None = None

    def clock(self) -> float:
        return asyncio.get_running_loop().time()

    async def start(self) -> "BenchEnv":
        loop = asyncio.get_running_loop()
        if self.mode == "sim":
            self.net = SimNetwork(self.profile, self.seed)
            self.server = FileServer(self.export, self.credential, export_id="bench", clock=loop.time,
                                     poll_interval=None)
            await self.server.start(self.net.transport("server"), "server:1")
            transport, addr = self.net.transport("client"), "server:1"
        else:
            self.server = FileServer(self.export, self.credential, export_id="bench", poll_interval=None)
            listener = await self.server.start(TcpTransport("server"), "127.0.0.1:0")
            addr = "127.0.0.1:%d" % listener.sockets[0].getsockname()[1]
            transport = TcpTransport("client")
        cfg = MountConfig(addr, "bench", self.cache_root, list(self.localized), **self.knobs)
        self.mount = await Mount(cfg, transport, self.credential).start()
        return self

    async def refresh(self, rel: str = "") -> None:
        """Make the server notice fixture files written straight into the export."""
        changed = {path for path, _ in self.server.poll_changes()}
        e = self.mount.cache.get(rel)
        if rel in changed and e is not None and e.state == EntryState.CACHED:
            # let the INVALIDATE push arrive before listing again
            for _ in range(10000):
                if e.state != EntryState.CACHED:
                    break
                await asyncio.sleep(0.001)
        await self.mount.opendir(rel)

    async def close(self) -> None:
        if self.mount is not None:
            await self.mount.unmount()
        if self.server is not None:
            await self.server.stop()
        if self._own_dir:
            shutil.rmtree(self.workdir, ignore_errors=True)

    async def __aenter__(self) -> "BenchEnv":
        return await self.start()

    async def __aexit__(self, *exc) -> None:
        await self.close()


def _free_bytes(path: str) -> int:
    st = os.statvfs(path)
    return st.f_bavail * st.f_frsize


class _Timer:
    def __init__(self, env: BenchEnv):
        self.env = env

    def __enter__(self):
        self.w0 = time.perf_counter()
        self.l0 = self.env.clock()
        return self

    def __exit__(self, *exc):
        self.wall = time.perf_counter() - self.w0
        self.logical = self.env.clock() - self.l0


# -- scenarios --------------------------------------------------------------


async def bench_write(env: BenchEnv, sizes_mib=DEFAULT_SIZES_MIB, chunk: int = MiB) -> BenchReport:
    """Create and fill files of each size; the timing includes close."""
    rep = BenchReport(Scenario.WRITE_THROUGHPUT, profile=env.profile.to_dict(), mode=env.mode)
    m = env.mount
    await m.opendir("")
    block = random.Random(env.seed).randbytes(chunk)
    for i, size in enumerate(sizes_mib):
        nbytes = size * MiB
        if _free_bytes(env.workdir) < 4 * nbytes:
            rep.notes[f"skipped_{size}MiB"] = "insufficient disk"
            continue
        rel = f"write-{size}M.bin"
        with _Timer(env) as t:
            h = await m.open(rel, "WRITE", create=True, truncate=True)
            left = nbytes
            while left:
                left -= m.write(h, block[: min(chunk, left)])
            m.close(h)
        rep.runs.append(BenchRun.measure(i, t.wall, nbytes, label=f"{size}MiB", logical_time=t.logical))
        await m.drain()
        m.unlink(rel)
        await m.drain()
    return rep


async def bench_read(env: BenchEnv, sizes_mib=DEFAULT_SIZES_MIB, warm_runs: int = 3,
                     chunk: int = MiB) -> BenchReport:
    """Cold read, warm reads, and a direct read of the cached copy per size."""
    rep = BenchReport(Scenario.READ_THROUGHPUT, profile=env.profile.to_dict(), mode=env.mode)
    m = env.mount
    idx = 0
    for size in sizes_mib:
        nbytes = size * MiB
        if _free_bytes(env.workdir) < 3 * nbytes:
            rep.notes[f"skipped_{size}MiB"] = "insufficient disk"
            continue
        rel = f"read-{size}M.bin"
        write_random_file(os.path.join(env.export, rel), nbytes, env.seed + size)
        await env.refresh()
        for label in ["cold"] + ["warm"] * warm_runs:
            before = m.stats["fetches"]
            with _Timer(env) as t:
                h = await m.open(rel)
                buf = bytearray(chunk)
                while m.readinto(h, buf):
                    pass
                m.close(h)
            rep.runs.append(BenchRun.measure(idx, t.wall, nbytes, label=f"{label}-{size}MiB",
                                             logical_time=t.logical, fetches=m.stats["fetches"] - before))
            idx += 1
        for _ in range(warm_runs):
            w = direct_read(m.cache.data_path(rel), chunk)
            rep.runs.append(BenchRun.measure(idx, w, nbytes, label=f"local-{size}MiB"))
            idx += 1
        os.unlink(os.path.join(env.export, rel))
        m.cache.remove(rel)
    return rep


def direct_read(path: str, chunk: int = MiB) -> float:
    """Wall time to read ``path`` straight off the cache volume."""
    buf = bytearray(chunk)
    t0 = time.perf_counter()
    fd = os.open(path, os.O_RDONLY)
    try:
        pos = 0
        while True:
            n = os.preadv(fd, [buf], pos)
            if not n:
                break
            pos += n
    finally:
        os.close(fd)
    return time.perf_counter() - t0


async def walk_and_hash(m: Mount, rel: str = "") -> tuple[str, int]:
    """Enter every directory, read every file, hash all contents in order."""
    h = hashlib.sha256()
    total = 0
    await m.chdir(rel)
    for a in await m.opendir(rel):
        child = f"{rel}/{a.name}" if rel else a.name
        if a.kind.value == "DIR":
            sub, n = await walk_and_hash(m, child)
            h.update(sub.encode())
            total += n
        else:
            fh = await m.open(child)
            data = m.read(fh)
            m.close(fh)
            h.update(child.encode() + b"\0" + data)
            total += len(data)
    return h.hexdigest(), total


async def bench_tree(env: BenchEnv, runs: int = 2) -> BenchReport:
    rep = BenchReport(Scenario.TREE_WALK_BUILD, profile=env.profile.to_dict(), mode=env.mode)
    m = env.mount
    tree = os.path.join(env.export, "tree")
    files = make_source_tree(tree, env.seed)
    await env.refresh()
    digests = set()
    for i in range(runs):
        before = m.stats["fetches"]
        mark = env.net.transcript.mark() if env.net else 0
        with _Timer(env) as t:
            digest, nbytes = await walk_and_hash(m, "tree")
        digests.add(digest)
        run = BenchRun.measure(i, t.wall, nbytes, label="cold" if i == 0 else "warm",
                               logical_time=t.logical, fetches=m.stats["fetches"] - before)
        rep.runs.append(run)
        if env.net:
            rep.notes[f"fetch_requests_run{i}"] = env.net.transcript.count(since=mark, kind="FETCH_REQ")
    rep.notes["files"] = len(files)
    rep.notes["consistent_digest"] = len(digests) == 1
    return rep


async def bench_large(env: BenchEnv, size: int = 1024 * MiB, runs: int = 5, rel: str = "large.bin",
                      prepared: bool = False) -> BenchReport:
    """Repeated full line-count scans of one large file."""
    rep = BenchReport(Scenario.LARGE_FILE_REPEAT, profile=env.profile.to_dict(), mode=env.mode)
    if not prepared:
        if _free_bytes(env.workdir) < 3 * size:
            rep.notes["skipped"] = "insufficient disk"
            return rep
        write_random_file(os.path.join(env.export, rel), size, env.seed)
        await env.refresh()
    m = env.mount
    lines = set()
    for i in range(runs):
        before = m.stats["fetches"]
        with _Timer(env) as t:
            n, total = await mount_scan(m, rel)
        lines.add(n)
        rep.runs.append(BenchRun.measure(i, t.wall, total, label=f"scan{i + 1}",
                                         logical_time=t.logical, fetches=m.stats["fetches"] - before))
    t0 = time.perf_counter()
    n, total = local_scan(m.cache.data_path(rel))
    rep.notes["direct_local_scan_wall"] = time.perf_counter() - t0
    rep.notes["lines"] = n
    rep.notes["consistent_line_count"] = lines == {n}
    p = env.profile
    rep.notes["predicted_first_run"] = predicted_transfer_time(size, p)
    return rep


def predicted_transfer_time(size: int, profile: LinkProfile) -> float:
    """Lower bound for fetching ``size`` bytes: request, one-way reply latency, body."""
    bw = profile.bandwidth
    return 2 * profile.one_way_latency + (size / bw if bw > 0 else 0.0)


async def run_scenario(scenario: Scenario | str, env: BenchEnv, **kw) -> BenchReport:
    scenario = Scenario(scenario)
    if scenario == Scenario.WRITE_THROUGHPUT:
        return await bench_write(env, **kw)
    if scenario == Scenario.READ_THROUGHPUT:
        return await bench_read(env, **kw)
    if scenario == Scenario.TREE_WALK_BUILD:
        return await bench_tree(env, **kw)
    return await bench_large(env, **kw)
