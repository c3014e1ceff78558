"""Edge training server and car-side client.

The car streams FRAME/LABEL pairs, asks for a training run, and receives
the trained model back as an LSEG checkpoint inside a MODEL message. One
training session lives per server process; several clients may feed it.
"""
from __future__ import annotations

import dataclasses
import logging
import socket
import socketserver
import threading
from pathlib import Path
from typing import Iterable

import numpy as np

from . import checkpoint, datapipe, network
from .errors import DataError, LanesegError, ProtocolError, RemoteError
from .protocol import (
    FATAL_CODES, ErrorCode, FramePayload, MsgType, decode_ack, decode_error,
    decode_train_request, encode_ack, encode_error, encode_train_request, read_message, send_message,
)
from .training import Sample, TrainConfig, images_to_input, train

log = logging.getLogger(__name__)

DEFAULT_PORT = 7878
IDLE, TRAINING, DONE, FAILED = "idle", "training", "done", "failed"


class Session:
    """Shared dataset plus training status; every mutation happens under ``lock``."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.lock = threading.Lock()
        self.pairs: list[Sample] = []
        self.status = IDLE
        self.model_bytes: bytes | None = None
        self.params: network.ModelParams | None = None
        self.error: str | None = None
        self._thread: threading.Thread | None = None

    def add_pair(self, sample: Sample) -> None:
        with self.lock:
            self.pairs.append(sample)

    def start_training(self, epochs: int = 0) -> threading.Thread:
        """Snapshot the current pairs and train on a worker thread."""
        with self.lock:
            if self.status == TRAINING:
                raise ProtocolError("a training run is already in progress", ErrorCode.BUSY)
            if not self.pairs:
                raise ProtocolError("empty dataset", ErrorCode.EMPTY_DATASET)
            snapshot = list(self.pairs)
            config = dataclasses.replace(self.config, epochs=epochs) if epochs else self.config
            self.status = TRAINING
            self.error = None
            thread = threading.Thread(target=self._run, args=(snapshot, config), name="laneseg-train", daemon=True)
            self._thread = thread
        thread.start()
        return thread

    def _run(self, snapshot, config):
        try:
            result = train(snapshot, config)
            data = checkpoint.serialize_model(result.params)
        except Exception as exc:  # noqa: BLE001 - any failure marks the run failed
            log.exception("training failed")
            with self.lock:
                self.status, self.error = FAILED, str(exc)
            return
        with self.lock:
            self.params, self.model_bytes, self.status = result.params, data, DONE

    def snapshot_status(self) -> str:
        with self.lock:
            return self.status


class _Handler(socketserver.BaseRequestHandler):
    server: "_TCPServer"

    def handle(self):
        sock: socket.socket = self.request
        sock.settimeout(self.server.read_timeout)
        session = self.server.session
        pending: FramePayload | None = None
        while True:
            try:
                msg = read_message(sock)
                if msg is None:
                    return
                pending = self._dispatch(sock, session, msg, pending)
            except ProtocolError as exc:
                log.info("protocol error from %s: %s", self.client_address, exc)
                try:
                    send_message(sock, MsgType.ERROR, encode_error(exc.code, str(exc)))
                except OSError:
                    return
                if exc.code in FATAL_CODES:
                    return
            except OSError:
                return

    def _dispatch(self, sock, session: Session, msg, pending):
        if msg.msg_type == MsgType.FRAME:
            frame = FramePayload.decode(msg.payload)
            if frame.channels != 3:
                raise ProtocolError("FRAME must carry 3-channel RGB pixels", ErrorCode.BAD_DATA)
            send_message(sock, MsgType.ACK, encode_ack(frame.frame_id))
            return frame
        if msg.msg_type == MsgType.LABEL:
            label = FramePayload.decode(msg.payload)
            if pending is None or label.frame_id != pending.frame_id:
                want = "none" if pending is None else pending.frame_id
                raise ProtocolError(f"LABEL id {label.frame_id} does not match pending FRAME id {want}",
                                    ErrorCode.ID_MISMATCH)
            if (label.width, label.height) != (pending.width, pending.height):
                raise ProtocolError("LABEL size differs from its FRAME", ErrorCode.BAD_DATA)
            arr = label.to_array()
            try:
                labels = datapipe.decode_label_colors(arr) if label.channels == 3 else arr.astype(np.uint8)
            except DataError as exc:
                raise ProtocolError(str(exc), ErrorCode.BAD_DATA) from None
            if labels.ndim != 2 or labels.max(initial=0) >= 3:
                raise ProtocolError("LABEL must hold class ids 0..2 or class colours", ErrorCode.BAD_DATA)
            session.add_pair(Sample(f"frame{pending.frame_id}", pending.to_array(), labels))
            send_message(sock, MsgType.ACK, encode_ack(label.frame_id))
            return None
        if msg.msg_type == MsgType.TRAIN_REQUEST:
            epochs = decode_train_request(msg.payload)
            thread = session.start_training(epochs)
            thread.join()
            with session.lock:
                status, data, err = session.status, session.model_bytes, session.error
            if status != DONE:
                raise ProtocolError(f"training failed: {err}", ErrorCode.TRAINING_FAILED)
            send_message(sock, MsgType.MODEL, data)
            return pending
        raise ProtocolError(f"clients may not send {msg.msg_type.name}", ErrorCode.UNEXPECTED)


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, session: Session, read_timeout: float):
        self.session = session
        self.read_timeout = read_timeout
        super().__init__(address, _Handler)


class EdgeServer:
    """Threaded edge server. Use as a context manager or call start/stop."""

    def __init__(self, config: TrainConfig, address=("127.0.0.1", DEFAULT_PORT), read_timeout: float = 30.0):
        self.session = Session(config)
        self._server = _TCPServer(tuple(address), self.session, read_timeout)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def status(self) -> str:
        return self.session.snapshot_status()

    def start(self) -> "EdgeServer":
        self._thread = threading.Thread(target=self._server.serve_forever, name="laneseg-serve", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def infer(self, x: np.ndarray) -> np.ndarray:
        """Inference with the server's in-memory trained parameters."""
        with self.session.lock:
            params = self.session.params
        if params is None:
            raise LanesegError("no trained model yet")
        return network.predict(x, params)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def parse_address(text: str, default_port: int = DEFAULT_PORT) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host:
        return text or "127.0.0.1", default_port
    try:
        return host, int(port)
    except ValueError:
        raise ValueError(f"bad address {text!r}; expected host:port") from None


def serve(bind_address, config: TrainConfig, read_timeout: float = 30.0) -> None:
    """Run an edge server until interrupted."""
    if isinstance(bind_address, str):
        bind_address = parse_address(bind_address)
    server = EdgeServer(config, bind_address, read_timeout)
    log.info("serving on %s:%d", *server.address)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server._server.server_close()


# ---------------------------------------------------------------- client


class EdgeClient:
    """Sequential client: every send waits for the server's reply."""

    def __init__(self, address, timeout: float | None = 600.0):
        if isinstance(address, str):
            address = parse_address(address)
        self.sock = socket.create_connection(tuple(address), timeout=timeout)

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _reply(self, expect: MsgType):
        msg = read_message(self.sock)
        if msg is None:
            raise ConnectionError("server closed the connection")
        if msg.msg_type == MsgType.ERROR:
            raise RemoteError(*decode_error(msg.payload))
        if msg.msg_type != expect:
            raise ProtocolError(f"expected {expect.name}, got {msg.msg_type.name}", ErrorCode.UNEXPECTED)
        return msg

    def send_pair(self, frame_id: int, image: np.ndarray, labels: np.ndarray) -> None:
        """Send FRAME then LABEL (colour-coded), checking both ACKs echo ``frame_id``."""
        send_message(self.sock, MsgType.FRAME, FramePayload.from_array(frame_id, image).encode())
        self._check_ack(frame_id)
        colors = datapipe.encode_label_colors(labels)
        send_message(self.sock, MsgType.LABEL, FramePayload.from_array(frame_id, colors).encode())
        self._check_ack(frame_id)

    def _check_ack(self, frame_id):
        got = decode_ack(self._reply(MsgType.ACK).payload)
        if got != frame_id:
            raise ProtocolError(f"ACK for frame {got}, expected {frame_id}", ErrorCode.ID_MISMATCH)

    def request_training(self, epochs: int = 0) -> bytes:
        send_message(self.sock, MsgType.TRAIN_REQUEST, encode_train_request(epochs))
        return self._reply(MsgType.MODEL).payload


def send_frames(address, samples: Iterable[Sample] | str | Path, then_train: bool = False, epochs: int = 0,
                out_path=None, timeout: float | None = 600.0) -> bytes | None:
    """Stream samples (or a manifest path) to the server; optionally train and fetch the model.

    Returns the MODEL bytes (also written to ``out_path`` if given), or None
    when ``then_train`` is false.
    """
    if isinstance(samples, (str, Path)):
        samples = datapipe.load_samples(samples)
    with EdgeClient(address, timeout=timeout) as client:
        for i, s in enumerate(samples):
            client.send_pair(i, s.image, s.labels)
        if not then_train:
            return None
        data = client.request_training(epochs)
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_bytes(data)
    return data


def client_infer(model_bytes: bytes, image: np.ndarray) -> np.ndarray:
    """Car-side inference with a returned artifact."""
    params = checkpoint.deserialize_model(model_bytes)
    return network.predict(images_to_input([image]), params)
