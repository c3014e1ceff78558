"""
Training at the edge
====================

A car streams frames and labels to an edge server, asks for a short
training run and gets the model back as an LSEG checkpoint. Inference on
the car with the returned bytes matches the server bit for bit.
"""
from laneseg import service
from laneseg.datapipe import synthetic_dataset
from laneseg.training import TrainConfig, images_to_input

frames = synthetic_dataset(5, 32, 32, seed=4)
config = TrainConfig(batch_size=2, filters=(8, 16), gcn_k=5)

with service.EdgeServer(config, ("127.0.0.1", 0)) as server:
    print("server listening on %s:%d" % server.address)
    model = service.send_frames(server.address, frames[:4], then_train=True, epochs=2)
    on_server = server.infer(images_to_input([frames[4].image]))

print(f"received {len(model)} bytes, magic {model[:4]!r}")
on_car = service.client_infer(model, frames[4].image)
print("car and server predictions identical:", on_car.tobytes() == on_server.tobytes())
