"""Two clients share an export over a simulated 40 ms link.

Bob's open handle keeps its snapshot after Alice rewrites the file. Bob's
next open sees the new version because the server's callback marked the
cached copy stale.
Runs on the virtual clock, so the printed times are logical seconds.
"""

import asyncio
import os
import tempfile
import time

from xufs import netsim
from xufs.netsim import LinkProfile, SimNetwork
from xufs.server import FileServer
from xufs.vfs import Mount, MountConfig
from xufs.wire import AuthCredential


async def demo(tmp):
    export = os.path.join(tmp, "export")
    os.makedirs(export)
    with open(os.path.join(export, "notes.txt"), "wb") as f:
        f.write(b"first draft\n")

    net = SimNetwork(LinkProfile(one_way_latency=0.04), seed=1)
    cred = AuthCredential("demo", b"shared secret", time.time() + 3600)
    loop = asyncio.get_running_loop()
    server = FileServer(export, cred, export_id="home", clock=loop.time, poll_interval=None)
    await server.start(net.transport("server"), "server:1")

    mounts = {}
    for name in ("alice", "bob"):
        cfg = MountConfig("server:1", "home", os.path.join(tmp, f"cache-{name}"), client_id=name)
        mounts[name] = await Mount(cfg, net.transport(name), cred).start()
    alice, bob = mounts["alice"], mounts["bob"]

    await alice.opendir("")
    await bob.opendir("")
    t0 = loop.time()
    reader = await bob.open("notes.txt")
    print(f"bob opened notes.txt in {loop.time() - t0:.3f}s: {bob.read(reader)!r}")

    w = await alice.open("notes.txt", "READWRITE")
    alice.seek(w, 0)
    alice.write(w, b"second draft\n")
    alice.close(w)  # returns at once; the flush drains in the background
    await asyncio.sleep(1.0)

    bob.seek(reader, 0)
    print(f"bob's open handle still reads {bob.read(reader)!r}")
    bob.close(reader)
    print(f"bob's cached copy is now {bob.cache.get('notes.txt').state.name}")
    again = await bob.open("notes.txt")
    print(f"bob reopens and reads {bob.read(again)!r}")
    bob.close(again)

    # bob's stale attributes still say 12 bytes, so its first fetch is
    # answered with SIZE_CHANGED and fresh attributes, then retried
    for e in net.transcript.query(kind=("FETCH_REQ", "FETCH_DONE", "ERROR")):
        print(f"  t={e.t:.2f} {e.conn:8} {e.direction} {e.kind} {e.summary.get('code', '')}")
    for m in (alice, bob):
        await m.unmount()
    await server.stop()


if __name__ == "__main__":
    with tempfile.TemporaryDirectory() as tmp:
        netsim.run(demo(tmp), virtual=True)
