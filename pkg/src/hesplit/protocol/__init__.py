"""Two-party training protocol: framing, transports, slot layouts and both roles."""

from __future__ import annotations

import threading
from dataclasses import dataclass

from ..config import RunConfig
from ..data_io import Dataset
from ..neuralnet import Model, build_layers
from .client import ClientResult, ClientSession
from .common import PROTOCOL_VERSION, EpochStats, backend_from_config, plan_from_config
from .layouts import SegmentPlan, plan_segment
from .messages import Message, MsgType, ProtocolError
from .server import ServerResult, ServerSession
from .transport import Channel, PipeTransport, TcpTransport, parse_address

__all__ = [
    "PROTOCOL_VERSION", "Channel", "ClientResult", "ClientSession", "EpochStats", "LocalRun", "Message",
    "MsgType", "PipeTransport", "ProtocolError", "SegmentPlan", "ServerResult", "ServerSession",
    "TcpTransport", "backend_from_config", "parse_address", "plan_from_config", "plan_segment", "run_local",
]


@dataclass
class LocalRun:
    server: ServerResult
    client: ClientResult
    config: RunConfig

    @property
    def model(self) -> Model:
        """Full model from the decrypted server segment and the client segment."""
        cm = self.client.client_model
        weights = tuple(self.client.server_weights) + tuple(cm.weights)
        layers = build_layers(self.config.model.layer_sizes, self.config.activations())
        return Model(layers, weights)


def run_local(config: RunConfig, dataset: Dataset, threads: int = 1, timeout: float | None = None) -> LocalRun:
    """Run both parties in one process over an in-memory pipe.

    The server thread gets only the features (or nothing, with encrypted
    data); the client keeps the labels and the key pair.
    """
    a, b = PipeTransport.pair()
    timeout = config.protocol.timeout if timeout is None else timeout
    server_ch, client_ch = Channel(a, None, timeout), Channel(b, None, timeout)
    enc = config.protocol.encrypt_data
    server = ServerSession(config, None if enc else dataset.features, server_ch,
                           backend_from_config(config, 1), threads)
    client = ClientSession(config, dataset.labels, client_ch, backend_from_config(config, 2),
                           dataset.features if enc else None)
    box: dict = {}

    def serve():
        try:
            box["server"] = server.run()
        except BaseException as exc:  # surfaced after join
            box["error"] = exc
        finally:
            a.close()

    t = threading.Thread(target=serve, name="hesplit-server", daemon=True)
    t.start()
    try:
        client_result = client.run()
    except ProtocolError as exc:
        t.join(5)
        raise box.get("error", exc)
    finally:
        b.close()
    t.join()
    if "error" in box:
        raise box["error"]
    return LocalRun(box["server"], client_result, config)
