#!/usr/bin/env python3
"""
Streaming with mid-generation prompt steering
=============================================

Starts the framed-protocol server, connects a loopback client, and submits
a prompt update for a future chunk while frames stream. A retroactive
update is rejected with an ERROR message but the stream keeps flowing.
"""

import threading

from inferix import protocol
from inferix.engine import DenoiseSchedule, Engine, GenerationRequest, ModelConfig, build_model
from inferix.protocol import FramePayload, PromptUpdatePayload
from inferix.server import StreamClient, serve, summary_from_hello

model = build_model(ModelConfig(layers=1, heads=2, head_dim=8, block_len=8,
                                frame_shape=(16, 16), prompt_dim=16))
engine = Engine(model)
server = serve(engine)
print(f"serving on {server.address[0]}:{server.address[1]}")

client = StreamClient(*server.address)
hello = client.recv()
print(f"HELLO: {summary_from_hello(hello)}")

# steer chunk 2 onward before generation reaches it
client.send(protocol.prompt_update_message(
    PromptUpdatePayload(2, "the sky darkens")))

runner = threading.Thread(
    target=server.run_generation,
    args=(GenerationRequest(num_blocks=4,
                            schedule=DenoiseSchedule(steps=[1.0, 0.5]),
                            seed=1),))
runner.start()

frames = 0
for msg in iter(client.recv, None):
    if msg.kind == protocol.FRAME:
        fp = FramePayload.decode(msg.payload)
        frames += 1
        if fp.frame_index == 0:
            print(f"  chunk {fp.chunk_index} begins "
                  f"({fp.width}x{fp.height} frames)")
    elif msg.kind == protocol.ERROR:
        print(f"  ERROR from server: {msg.payload.decode()}")
    elif msg.kind == protocol.END:
        print(f"END after {frames} frames")
        break
runner.join()

# too late now: everything is generated
client2 = StreamClient(*server.address)
client2.recv()  # HELLO
client2.send(protocol.prompt_update_message(PromptUpdatePayload(1, "rewind?")))
msg = client2.recv()
print(f"retroactive update -> {protocol.KIND_NAMES[msg.kind]}: "
      f"{msg.payload.decode()}")

client.close()
client2.close()
server.stop()
