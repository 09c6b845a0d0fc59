"""Client role: owns the key pair, the labels and the plaintext client segment."""

from __future__ import annotations

import logging
import secrets
import time
from dataclasses import dataclass, field

import numpy as np

from ..backend import Backend
from ..config import RunConfig
from ..neuralnet import (
    Model, activate, activation_grad, augment, backward, batch_order, forward, init_model, sgd_update,
)
from ..packing import client_fold, pack_deltas_dense, unpack_outputs_dense
from .common import PROTOCOL_VERSION, check_level_budget, plan_from_config
from .layouts import broadcast, build_layout, replicated, weight_slots, weights_from_slots
from .messages import Message, MsgType, ProtocolError, blob_array
from .transport import Channel

log = logging.getLogger(__name__)

UPLOAD_CHUNK = 256  # ciphertexts per DATA_UPLOAD frame


@dataclass
class ClientResult:
    metrics: list[dict] = field(default_factory=list)
    server_weights: list[np.ndarray] = field(default_factory=list)
    client_model: Model | None = None
    refreshes: int = 0


class ClientSession:
    """Key owner. ``features`` is only needed to upload encrypted samples."""

    role = "client"

    def __init__(self, config: RunConfig, labels: np.ndarray, channel: Channel, backend: Backend,
                 features: np.ndarray | None = None, session: int | None = None):
        self.config = config
        self.labels = np.asarray(labels, dtype=np.float64)
        self.channel = channel
        if channel.session is None:
            channel.session = session if session is not None else secrets.randbits(63)
        self.backend = backend
        self.plan = plan_from_config(config, backend.slot_count)
        check_level_budget(config, backend.top_level)
        if config.protocol.encrypt_data and features is None:
            raise ValueError("encrypt_data needs the client (data owner) to hold the samples for upload")
        self.features = features
        self.keys = None
        self.model: Model | None = None
        self.result = ClientResult()
        self.n = config.model.split_index
        self.boundary = config.activations()[self.n - 1]
        self._schedule: list[np.ndarray] = []
        self._epoch = 0
        self._reset_epoch()

    def _reset_epoch(self) -> None:
        self._loss_sum = 0.0
        self._correct = 0
        self._seen = 0
        self._refreshes = 0
        self._t0 = time.perf_counter()
        self._bytes0 = (self.channel.bytes_sent, self.channel.bytes_received)

    def _enc(self, rows) -> list[bytes]:
        be = self.backend
        return [be.serialize(be.encrypt(r, self.keys)) for r in rows]

    # ------------------------------------------------------------ initialization

    def handshake(self) -> None:
        be = self.backend
        self.keys = be.keygen(self.plan.rotation_steps(), seed=[self.config.crypto.seed, 7])
        self.channel.send(MsgType.HELLO, {
            "version": PROTOCOL_VERSION, "digest": self.config.digest().hex(), "role": "client",
        })
        reply = self.channel.recv(MsgType.HELLO)
        if not reply.meta.get("ok"):
            raise ProtocolError(f"handshake rejected: {reply.meta.get('error')}")
        self.channel.send(MsgType.PUBKEYS, {"rotation_steps": self.plan.rotation_steps()},
                          [be.serialize_keys(self.keys.public())])
        if self.config.protocol.encrypt_data:
            self._upload_data()
        ack = self.channel.recv(MsgType.ENC_WEIGHTS_ACK)
        if ack.meta.get("mode") != self.plan.mode:
            raise ProtocolError(f"server runs mode {ack.meta.get('mode')}, expected {self.plan.mode}")
        if int(ack.meta.get("samples", -1)) != self.labels.shape[0]:
            raise ProtocolError(f"server holds {ack.meta.get('samples')} samples, client has "
                                f"{self.labels.shape[0]} labels")
        m = self.config.model
        self.model = init_model(m.layer_sizes, self.config.activations(), m.init_seed).segment(self.n)

    def _upload_data(self) -> None:
        slots = self.backend.slot_count
        X = augment(np.asarray(self.features, dtype=np.float64))
        geo = self.plan.layers[0]
        if self.plan.mode == "persample":
            per = geo.n_ct
            layouts = (broadcast(x, geo.padded, slots, per) for x in X)
        else:
            per = 1
            layouts = (replicated(x, geo.padded, slots)[None, :] for x in X)
        pending: list[bytes] = []
        for k, rows in enumerate(layouts):
            pending.extend(self._enc(rows))
            last = k == X.shape[0] - 1
            if len(pending) >= UPLOAD_CHUNK or last:
                self.channel.send(MsgType.DATA_UPLOAD, {
                    "per_sample": per, "samples": X.shape[0], "final": last,
                }, pending)
                pending = []

    # ------------------------------------------------------------ main loop

    def run(self) -> ClientResult:
        try:
            self.handshake()
            while True:
                msg = self.channel.recv(MsgType.FWD_OUT, MsgType.REFRESH_REQ, MsgType.EPOCH_DONE, MsgType.SHUTDOWN)
                if msg.type == MsgType.FWD_OUT:
                    self._on_forward(msg)
                elif msg.type == MsgType.REFRESH_REQ:
                    self._on_refresh(msg)
                elif msg.type == MsgType.EPOCH_DONE:
                    self._on_epoch_done(msg)
                else:
                    if msg.meta.get("error"):
                        raise ProtocolError(f"server aborted: {msg.meta['error']}")
                    self._on_shutdown(msg)
                    break
        except Exception as exc:
            if not isinstance(exc, ProtocolError) or "server aborted" not in str(exc):
                try:
                    self.channel.send(MsgType.SHUTDOWN, {"error": f"{type(exc).__name__}: {exc}"})
                except Exception:
                    pass
            raise
        self.result.client_model = self.model
        return self.result

    def _batch_indices(self, epoch: int, batch: int) -> np.ndarray:
        if epoch != self._epoch or not self._schedule:
            p = self.config.protocol
            self._epoch = epoch
            self._schedule = batch_order(self.labels.shape[0], p.batch_size, epoch, p.seed, p.shuffle)
        return self._schedule[batch]

    def _decode_outputs(self, msg: Message, samples: int) -> np.ndarray:
        be = self.backend
        blobs = msg.blobs[:-1] if msg.meta.get("x_blob") else msg.blobs
        dec = [be.decrypt(be.deserialize(b), self.keys) for b in blobs]
        geo = self.plan.last
        rows = self.config.model.layer_sizes[self.n]
        if len(dec) != self.plan.outputs_per_batch(samples):
            raise ProtocolError(f"{len(dec)} FWD_OUT ciphertexts, expected {self.plan.outputs_per_batch(samples)}")
        if self.plan.mode == "dense":
            return unpack_outputs_dense(dec, geo.padded, rows, samples)
        if self.plan.mode == "scalar":
            return np.stack([d[:rows] for d in dec])
        span = geo.per_ct * geo.padded
        return np.stack([client_fold(d[:span], geo.per_ct, geo.padded, rows) for d in dec])

    def _on_forward(self, msg: Message) -> None:
        epoch, batch = int(msg.meta["epoch"]), int(msg.meta["batch"])
        idx = self._batch_indices(epoch, batch)
        if list(idx) != msg.meta.get("indices"):
            raise ProtocolError(f"batch {batch} of epoch {epoch} disagrees with the client's schedule")
        lr = self.config.protocol.learning_rate
        Z = self._decode_outputs(msg, len(idx))
        O = activate(self.boundary, Z)
        cache = forward(self.model, O)
        Y = self.labels[idx]
        value, grads = backward(self.model, cache, Y, self.config.model.loss)
        delta = lr * (grads.input_grad * activation_grad(self.boundary, Z))
        self.model = sgd_update(self.model, grads.weights, lr)
        self._loss_sum += value * len(idx)
        self._correct += int(np.sum(np.argmax(cache.prediction, 1) == np.argmax(Y, 1)))
        self._seen += len(idx)
        self.channel.send(MsgType.BOUNDARY_GRAD, {"batch": batch, "epoch": epoch},
                          self._pack_deltas(delta, msg))

    def _pack_deltas(self, delta: np.ndarray, msg: Message) -> list[bytes]:
        """Encrypt the scaled boundary delta in the layout the server consumes."""
        slots = self.backend.slot_count
        geo = self.plan.last
        mode = self.plan.mode
        if self.config.protocol.gradient_mode == "client_literal":
            X = blob_array(msg.blobs[-1])
            return self._enc(weight_slots(delta.T @ X, geo, slots))
        if mode == "dense":
            return self._enc(pack_deltas_dense(delta, geo.padded, slots))
        if mode == "scalar":
            rows = np.zeros((delta.shape[0], slots))
            rows[:, : delta.shape[1]] = delta
            return self._enc(rows)
        return self._enc(replicated(d, geo.padded, slots) for d in delta)

    def _on_refresh(self, msg: Message) -> None:
        be = self.backend
        srcs = [be.deserialize(b) for b in msg.blobs]
        cache: dict[int, np.ndarray] = {}

        def dec(i: int) -> np.ndarray:
            if i not in cache:
                cache[i] = be.decrypt(srcs[i], self.keys)
            return cache[i]

        rows = []
        slots = be.slot_count
        for g in msg.meta["groups"]:
            if g["kind"] == "same":
                rows.extend(dec(int(i)) for i in g["sources"])
                continue
            v = np.array([dec(int(c))[int(s)] for c, s in g["sources"]]) * float(g.get("scale", 1.0))
            rows.extend(build_layout(g["kind"], v, int(g["padded"]), slots, int(g.get("count", 1))))
        self._refreshes += 1
        self.result.refreshes += 1
        self.channel.send(MsgType.REFRESH_RESP, {"purpose": msg.meta.get("purpose")}, self._enc(rows))

    def _on_epoch_done(self, msg: Message) -> None:
        n = max(self._seen, 1)
        sent, recv = self._bytes0
        mine = {
            "epoch": int(msg.meta.get("server", {}).get("epoch", len(self.result.metrics))),
            "loss": self._loss_sum / n,
            "accuracy": self._correct / n,
            "wall_time": time.perf_counter() - self._t0,
            "bytes_sent": self.channel.bytes_sent - sent,
            "bytes_received": self.channel.bytes_received - recv,
            "refresh_rounds": self._refreshes,
        }
        self.channel.send(MsgType.EPOCH_DONE, {"client": mine})
        self.result.metrics.append({**mine, "server": msg.meta.get("server", {})})
        log.info("client epoch %d: loss %.5f accuracy %.4f", mine["epoch"], mine["loss"], mine["accuracy"])
        self._reset_epoch()

    def _on_shutdown(self, msg: Message) -> None:
        """Decrypt the returned server segment."""
        be = self.backend
        counts = msg.meta.get("counts", [])
        cts = [be.deserialize(b) for b in msg.blobs]
        if sum(counts) != len(cts):
            raise ProtocolError("final weight counts do not match the ciphertexts sent")
        out, k = [], 0
        for geo, c in zip(self.plan.layers, counts):
            slots = np.stack([be.decrypt(ct, self.keys) for ct in cts[k:k + c]])
            out.append(weights_from_slots(slots, geo))
            k += c
        self.result.server_weights = out
