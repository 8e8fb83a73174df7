"""Work through a partition, then let the queue drain.

The client keeps serving its cache while the link is down. Mutations
land in the on-disk operation log and replay in order once the link
heals. Logical time throughout.
"""

import asyncio
import os
import tempfile
import time

from xufs import netsim
from xufs.errors import XufsError
from xufs.netsim import LinkProfile, SimNetwork
from xufs.server import FileServer
from xufs.vfs import Mount, MountConfig
from xufs.wire import AuthCredential


async def demo(tmp):
    export = os.path.join(tmp, "export")
    os.makedirs(os.path.join(export, "src"))
    for name in ("main.c", "util.c"):
        with open(os.path.join(export, "src", name), "wb") as f:
            f.write(f"/* {name} */\n".encode())

    net = SimNetwork(LinkProfile(one_way_latency=0.05), seed=7)
    cred = AuthCredential("demo", b"shared secret", time.time() + 3600)
    loop = asyncio.get_running_loop()
    server = FileServer(export, cred, export_id="home", clock=loop.time, poll_interval=None)
    await server.start(net.transport("server"), "server:1")
    cfg = MountConfig("server:1", "home", os.path.join(tmp, "cache"), client_id="laptop")
    m = await Mount(cfg, net.transport("laptop"), cred).start()

    rep = await m.chdir("src")  # prefetches the small files in src/
    print(f"prefetched {len(rep.fetched)} files")

    net.set_partition(True)
    print("link down")
    h = await m.open("src/main.c", "WRITE", truncate=True)
    m.write(h, b"int main(void) { return 0; }\n")
    m.close(h)
    m.mkdir("src/gen")
    m.rename("src/util.c", "src/gen/util.c")
    try:
        await m.open("src/README")
    except XufsError as exc:
        print(f"uncached, unknown file while offline: {exc.code.name}")
    print(f"queued ops: {[op.kind.value for op in m.cache.queue.pending]}")

    await asyncio.sleep(5)
    net.set_partition(False)
    print("link up")
    while m.cache.queue.pending:
        await asyncio.sleep(1)
    print(f"drained by t={loop.time():.1f}s")
    for root, _, files in sorted(os.walk(export)):
        for name in sorted(files):
            if ".xufs" not in root:
                p = os.path.join(root, name)
                print(f"  {os.path.relpath(p, export)}: {open(p, 'rb').read()!r}")
    await m.unmount()
    await server.stop()


if __name__ == "__main__":
    with tempfile.TemporaryDirectory() as tmp:
        netsim.run(demo(tmp), virtual=True)
