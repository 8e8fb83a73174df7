"""Shared harness: a simulated world with one file server and any number of clients."""

from __future__ import annotations

import asyncio
import os
import time

import pytest

from xufs import netsim
from xufs.netsim import LinkProfile, SimNetwork
from xufs.server import FileServer
from xufs.vfs import Mount, MountConfig
from xufs.wire import AuthCredential

SERVER_ADDR = "server:1"
EXPORT = "home"


def credential(phrase: bytes = b"correct horse battery") -> AuthCredential:
    return AuthCredential("test", phrase, time.time() + 86400)


class World:
    """Server over ``<tmp>/export`` plus clients with caches under ``<tmp>/cache-<name>``."""

    def __init__(self, tmp, profile: LinkProfile | None = None, seed: int = 0, lease_term: float = 30.0,
                 files: dict[str, bytes] | None = None):
        self.tmp = str(tmp)
        self.export = os.path.join(self.tmp, "export")
        os.makedirs(self.export, exist_ok=True)
        for rel, data in (files or {}).items():
            self.put(rel, data)
        self.net = SimNetwork(profile or LinkProfile(), seed)
        self.cred = credential()
        self.lease_term = lease_term
        self.server: FileServer | None = None
        self.mounts: list[Mount] = []

    @property
    def transcript(self):
        return self.net.transcript

    def put(self, rel: str, data: bytes) -> None:
        p = os.path.join(self.export, rel)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        with open(p, "wb") as f:
            f.write(data)

    def read(self, rel: str) -> bytes:
        with open(os.path.join(self.export, rel), "rb") as f:
            return f.read()

    def cache_root(self, name: str) -> str:
        return os.path.join(self.tmp, f"cache-{name}")

    async def start_server(self) -> FileServer:
        loop = asyncio.get_running_loop()
        self.server = FileServer(self.export, self.cred, export_id=EXPORT, clock=loop.time,
                                 poll_interval=None, lease_term=self.lease_term)
        await self.server.start(self.net.transport("server"), SERVER_ADDR)
        return self.server

    async def stop_server(self) -> None:
        if self.server is not None:
            await self.server.stop()
            self.server = None

    def mount_config(self, name: str, localized=(), **knobs) -> MountConfig:
        cfg = MountConfig(SERVER_ADDR, EXPORT, self.cache_root(name), list(localized), client_id=name)
        for k, v in knobs.items():
            setattr(cfg, k, v)
        return cfg

    async def client(self, name: str = "A", localized=(), profile: LinkProfile | None = None,
                     crash_hook=None, **knobs) -> Mount:
        cfg = self.mount_config(name, localized, **knobs)
        m = Mount(cfg, self.net.transport(name, profile), self.cred, crash_hook=crash_hook)
        await m.start()
        self.mounts.append(m)
        return m

    async def settle(self, seconds: float = 1.0) -> None:
        """Let background drains and pushes run for a while of logical time."""
        await asyncio.sleep(seconds)

    async def close(self) -> None:
        for m in self.mounts:
            if not m._closing:
                await m.unmount(drain=False)
        await self.stop_server()


def run_world(tmp, body, *, start_server: bool = True, **kw):
    async def main():
        w = World(tmp, **kw)
        if start_server:
            await w.start_server()
        try:
            return await body(w)
        finally:
            await w.close()

    return netsim.run(main())


@pytest.fixture
def sim(tmp_path):
    """``sim(body, **world_kw)`` runs ``await body(world)`` under the virtual clock."""
    counter = iter(range(1000))

    def go(body, **kw):
        d = tmp_path / f"w{next(counter)}"
        d.mkdir()
        return run_world(d, body, **kw)

    return go


# -- acceptance reporting --

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1][1:])):
            terminalreporter.write_line(line)
