import socket
import struct

import numpy as np
import pytest

from laneseg import checkpoint, network, protocol as P, service
from laneseg.errors import RemoteError
from laneseg.training import TrainConfig, images_to_input

CFG = TrainConfig(epochs=1, batch_size=2, filters=(4, 4), gcn_k=3, seed=0)


@pytest.fixture
def server():
    with service.EdgeServer(CFG, ("127.0.0.1", 0), read_timeout=10) as srv:
        yield srv


def _raw(server):
    s = socket.create_connection(server.address, timeout=10)
    return s


def test_ack_echoes_frame_id(server, toy_samples):
    s = toy_samples[0]
    with _raw(server) as sock:
        P.send_message(sock, P.MsgType.FRAME, P.FramePayload.from_array(77, s.image).encode())
        msg = P.read_message(sock)
        assert msg.msg_type == P.MsgType.ACK and P.decode_ack(msg.payload) == 77


def test_truncated_message_gets_error_then_close(server):
    with _raw(server) as sock:
        sock.sendall(struct.pack(">IB", 10, P.MsgType.FRAME) + b"x" * 9)
        sock.shutdown(socket.SHUT_WR)
        msg = P.read_message(sock)
        assert msg.msg_type == P.MsgType.ERROR
        assert P.decode_error(msg.payload)[0] == P.ErrorCode.TRUNCATED
        assert P.read_message(sock) is None


def test_unknown_type_closes(server):
    with _raw(server) as sock:
        sock.sendall(b"\x00\x00\x00\x00\x63")
        msg = P.read_message(sock)
        assert P.decode_error(msg.payload)[0] == P.ErrorCode.UNKNOWN_TYPE
        assert P.read_message(sock) is None


def test_empty_dataset_train_request(server):
    with service.EdgeClient(server.address) as client:
        with pytest.raises(RemoteError) as e:
            client.request_training(1)
    assert e.value.code == P.ErrorCode.EMPTY_DATASET and "empty dataset" in e.value.reason
    assert server.status == service.IDLE


def test_label_id_mismatch_keeps_connection(server, toy_samples):
    s = toy_samples[0]
    with service.EdgeClient(server.address) as client:
        P.send_message(client.sock, P.MsgType.FRAME, P.FramePayload.from_array(1, s.image).encode())
        client._check_ack(1)
        P.send_message(client.sock, P.MsgType.LABEL, P.FramePayload.from_array(2, s.labels).encode())
        with pytest.raises(RemoteError) as e:
            client._reply(P.MsgType.ACK)
        assert e.value.code == P.ErrorCode.ID_MISMATCH
        client.send_pair(3, s.image, s.labels)  # still usable
    assert len(server.session.pairs) == 1


def test_server_absent():
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    with pytest.raises(ConnectionError):
        service.send_frames(("127.0.0.1", port), [], then_train=False, timeout=2)


def test_loopback_training_returns_model(server, toy_samples, tmp_path):
    data = service.send_frames(server.address, toy_samples[:1], then_train=True, epochs=1,
                               out_path=tmp_path / "m.lseg")
    assert data[:4] == b"LSEG"
    assert (tmp_path / "m.lseg").read_bytes() == data
    params = checkpoint.deserialize_model(data)
    assert server.status == service.DONE
    x = images_to_input([toy_samples[1].image])
    assert service.client_infer(data, toy_samples[1].image).tobytes() == server.infer(x).tobytes()
    assert network.predict(x, params).shape == (1, 3, 32, 32)


def test_training_uses_snapshot(toy_samples):
    session = service.Session(CFG)
    session.add_pair(toy_samples[0])
    thread = session.start_training()
    session.add_pair(toy_samples[1])  # arrives mid-run
    thread.join()
    assert session.status == service.DONE and len(session.pairs) == 2


def test_parse_address():
    assert service.parse_address("0.0.0.0:9000") == ("0.0.0.0", 9000)
    assert service.parse_address("myhost") == ("myhost", 7878)
    with pytest.raises(ValueError):
        service.parse_address("h:x")
