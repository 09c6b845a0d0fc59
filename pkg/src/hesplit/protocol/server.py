"""Server role: holds the samples and the encrypted server segment.

The server receives only public key material. It never sees labels, and every
value it computes stays encrypted; ciphertexts that run out of levels (or need
a new slot layout) go back to the client in a refresh round-trip.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..backend import Backend
from ..config import RunConfig
from ..neuralnet import augment, batch_order, eval_poly_encrypted, init_model
from ..packing import (
    BATCH, ROTSUM, SCALAR, PackedWeights, batch_forward_dense, batch_gradient_dense, layout_row,
    matmat_rotsum, scalar_forward, scalar_gradient,
)
from .common import (
    PROTOCOL_VERSION, EpochStats, check_level_budget, parallel_map, plan_from_config, refresh_interval,
)
from .layouts import LayerGeometry, activation_mask, fold_marks, weight_slots
from .messages import MsgType, ProtocolError, array_blob
from .transport import Channel

log = logging.getLogger(__name__)


@dataclass
class ServerResult:
    stats: list[EpochStats] = field(default_factory=list)
    client_metrics: list[dict] = field(default_factory=list)
    levels: list[list[int]] = field(default_factory=list)
    updates: int = 0


class ServerSession:
    """Algorithm roles on the server side; ``features`` is ``None`` with encrypted data."""

    role = "server"

    def __init__(self, config: RunConfig, features: np.ndarray | None, channel: Channel, backend: Backend,
                 threads: int = 1):
        self.config = config
        self.channel = channel
        self.backend = backend
        self.threads = max(1, int(threads))
        self.plan = plan_from_config(config, backend.slot_count)
        check_level_budget(config, backend.top_level)
        self.encrypt_data = config.protocol.encrypt_data
        if self.encrypt_data and features is not None:
            raise ValueError("with encrypt_data the server must not be given plaintext samples")
        if not self.encrypt_data and features is None:
            raise ValueError("plaintext features required unless encrypt_data is set")
        self.features = None if features is None else np.asarray(features, dtype=np.float64)
        self.enc_samples: list[list] = []
        self.keys = None
        self.weights: list[list] = []
        self.polys = config.poly_activations()
        self.literal = config.protocol.gradient_mode == "client_literal"
        if self.literal and (self.plan.mode not in ("dense", "scalar")):
            raise ValueError("client_literal gradients need n = 1 with plaintext samples")
        self.refresh_every = refresh_interval(config, backend.top_level)
        self.updates = 0
        self.result = ServerResult()
        self._stats: EpochStats | None = None

    # ------------------------------------------------------------ plumbing

    def _ser(self, cts) -> list[bytes]:
        return [self.backend.serialize(c) for c in cts]

    def _de(self, blobs) -> list:
        return [self.backend.deserialize(b) for b in blobs]

    def _map(self, fn, items) -> list:
        return parallel_map(fn, items, self.threads)

    @property
    def n_samples(self) -> int:
        return len(self.enc_samples) if self.encrypt_data else self.features.shape[0]

    def _geo(self, i: int) -> LayerGeometry:
        return self.plan.layers[i]

    def _packed(self, i: int) -> PackedWeights:
        g = self._geo(i)
        scheme = {"batch": BATCH, "scalar": SCALAR, "rotsum": ROTSUM}[g.scheme]
        return PackedWeights(scheme, tuple(self.weights[i]), g.rows, g.cols, g.padded, g.per_ct, g.per_ct)

    def _refresh(self, purpose: str, cts: list, groups: list[dict]) -> list:
        st = self._stats
        st.refresh_rounds[purpose] += 1
        if sum(st.refresh_rounds.values()) > self.config.protocol.max_refreshes_per_epoch:
            raise ProtocolError(
                f"refresh cap of {self.config.protocol.max_refreshes_per_epoch} per epoch exceeded; "
                f"ledger: {self.ledger()}"
            )
        self.channel.send(MsgType.REFRESH_REQ, {"purpose": purpose, "groups": groups}, self._ser(cts))
        msg = self.channel.recv(MsgType.REFRESH_RESP)
        out = self._de(msg.blobs)
        st.refreshed_ciphertexts[purpose] += len(out)
        top = self.backend.top_level
        if any(self.backend.level(c) != top for c in out):
            raise ProtocolError("refreshed ciphertexts must come back at the top level")
        return out

    def _refresh_weights(self, purpose: str, layers: list[int]) -> None:
        flat = [c for i in layers for c in self.weights[i]]
        if not flat:
            return
        fresh = self._refresh(purpose, flat, [{"kind": "same", "sources": list(range(len(flat)))}])
        k = 0
        for i in layers:
            m = len(self.weights[i])
            self.weights[i] = fresh[k:k + m]
            k += m

    def ledger(self) -> list[list[int]]:
        return [[self.backend.level(c) for c in w] for w in self.weights]

    # ------------------------------------------------------------ initialization

    def handshake(self) -> None:
        hello = self.channel.recv(MsgType.HELLO)
        ours = self.config.digest().hex()
        problem = None
        if hello.meta.get("version") != PROTOCOL_VERSION:
            problem = f"protocol version {hello.meta.get('version')} != {PROTOCOL_VERSION}"
        elif hello.meta.get("digest") != ours:
            problem = "config digest mismatch"
        self.channel.send(MsgType.HELLO, {"ok": problem is None, "digest": ours, "error": problem})
        if problem:
            raise ProtocolError(f"handshake failed: {problem}")
        keys_msg = self.channel.recv(MsgType.PUBKEYS)
        try:
            self.keys = self.backend.deserialize_keys(keys_msg.blobs[0])
        except (ValueError, KeyError, IndexError, OSError) as exc:
            raise ProtocolError(f"malformed key material: {exc}") from None
        missing = set(self.plan.rotation_steps()) - set(self.keys.rotation_keys)
        if missing:
            raise ProtocolError(f"client keys lack rotation steps {sorted(missing)}")
        if self.encrypt_data:
            self._receive_data()

    def _receive_data(self) -> None:
        while True:
            msg = self.channel.recv(MsgType.DATA_UPLOAD)
            per = int(msg.meta["per_sample"])
            cts = self._de(msg.blobs)
            if len(cts) % per:
                raise ProtocolError("data upload is not a whole number of samples")
            self.enc_samples.extend(cts[i:i + per] for i in range(0, len(cts), per))
            if msg.meta.get("final"):
                break
        if len(self.enc_samples) != int(msg.meta["samples"]):
            raise ProtocolError(f"received {len(self.enc_samples)} samples, expected {msg.meta['samples']}")

    def initialize(self) -> None:
        """Generate the server segment, encrypt it under the client's key, report."""
        m = self.config.model
        model = init_model(m.layer_sizes, self.config.activations(), m.init_seed)
        n = m.split_index
        self.weights = []
        for i in range(n):
            slots = weight_slots(model.weights[i], self._geo(i), self.backend.slot_count)
            self.weights.append([self.backend.encrypt(s, self.keys) for s in slots])
        del model
        self.channel.send(MsgType.ENC_WEIGHTS_ACK, {
            "mode": self.plan.mode,
            "ciphertexts": [len(w) for w in self.weights],
            "levels": self.ledger(),
            "samples": self.n_samples,
        })

    # ------------------------------------------------------------ training

    def run(self) -> ServerResult:
        try:
            self.handshake()
            self.initialize()
            for epoch in range(self.config.protocol.epochs):
                self.train_epoch(epoch)
            self.shutdown()
        except Exception as exc:
            try:
                self.channel.send(MsgType.SHUTDOWN, {"error": f"{type(exc).__name__}: {exc}"})
            except Exception:
                pass
            raise
        self.result.levels = self.ledger()
        self.result.updates = self.updates
        return self.result

    def shutdown(self) -> None:
        """Hand the encrypted server segment back to the key owner."""
        flat = [c for w in self.weights for c in w]
        self.channel.send(MsgType.SHUTDOWN, {"counts": [len(w) for w in self.weights]}, self._ser(flat))

    def train_epoch(self, epoch: int) -> EpochStats:
        p = self.config.protocol
        self._stats = st = EpochStats(epoch)
        sent0, recv0 = self.channel.bytes_sent, self.channel.bytes_received
        for b, idx in enumerate(batch_order(self.n_samples, p.batch_size, epoch, p.seed, p.shuffle)):
            self._ensure_levels()
            outputs, cache = self._forward(idx)
            st.fwd_out_ciphertexts += len(outputs)
            meta = {"epoch": epoch, "batch": b, "indices": [int(i) for i in idx], "mode": self.plan.mode}
            blobs = self._ser(outputs)
            if self.literal:
                meta["x_blob"] = True
                blobs.append(array_blob(augment(self.features[idx])))
            self.channel.send(MsgType.FWD_OUT, meta, blobs)
            msg = self.channel.recv(MsgType.BOUNDARY_GRAD)
            if msg.meta.get("batch") != b:
                raise ProtocolError(f"gradient for batch {msg.meta.get('batch')} while on batch {b}")
            grads = self._de(msg.blobs)
            st.boundary_grad_ciphertexts += len(grads)
            self._backward(idx, grads, cache)
            self.updates += 1
            st.batches += 1
            if self.refresh_every and self.updates % self.refresh_every == 0:
                self._refresh_weights("scheduled", list(range(len(self.weights))))
        st.close(self.channel.bytes_sent - sent0, self.channel.bytes_received - recv0)
        self.channel.send(MsgType.EPOCH_DONE, {"server": st.to_dict()})
        reply = self.channel.recv(MsgType.EPOCH_DONE)
        self.result.stats.append(st)
        self.result.client_metrics.append(reply.meta.get("client", {}))
        log.info("server epoch %d: %s", epoch, st.to_dict())
        return st

    def _ensure_levels(self) -> None:
        """Ledger-driven refresh of any weight below the level its next use needs."""
        need = [1] + [2] * (len(self.weights) - 1) if self.plan.mode == "deep" else [1]
        low = [i for i, w in enumerate(self.weights) if min(self.backend.level(c) for c in w) < need[i]]
        if low:
            self._refresh_weights("level", low)

    # ------------------------------------------------------------ forward

    def _forward(self, idx: np.ndarray) -> tuple[list, dict]:
        be, keys = self.backend, self.keys
        mode = self.plan.mode
        if mode in ("dense", "scalar"):
            X = augment(self.features[idx])
            pw = self._packed(0)
            prod = batch_forward_dense(pw, X, be, keys) if mode == "dense" else scalar_forward(pw, X, be)
            self._stats.rotations += prod.rotations
            return prod.ciphertexts, {"X": X}
        if mode == "persample":
            W = self.weights[0]

            def one(s):
                data = self.enc_samples[s]
                lvl = min(be.level(W[0]), be.level(data[0]))
                return be.mul_ct_sum([be.level_drop(c, lvl) for c in W], [be.level_drop(c, lvl) for c in data], keys)

            return self._map(one, idx), {}
        return self._forward_deep(idx)

    def _forward_deep(self, idx: np.ndarray) -> tuple[list, dict]:
        be, keys = self.backend, self.keys
        n = len(self.weights)
        slots = be.slot_count
        if self.encrypt_data:
            inputs = [self.enc_samples[s] for s in idx]
            rows = inputs
        else:
            g0 = self._geo(0)
            Xa = augment(self.features[idx])
            inputs = [layout_row(x, g0.padded, slots) for x in Xa]  # plaintext patterns for the gradient
            rows = [x[None, :] for x in Xa]
        acts, derivs = [inputs], []
        h = max(abs(v) for v in self.config.model.activation_interval)
        for i in range(n - 1):
            B = self._packed(i)
            encrypted = i > 0 or self.encrypt_data

            def mat(row, B=B, encrypted=encrypted):
                return matmat_rotsum([list(row)] if encrypted else row, B, be, keys)

            results = self._map(mat, rows if i == 0 else acts[-1])
            self._stats.rotations += sum(r.rotations for r in results)
            nxt = self._geo(i + 1)
            last = i + 1 == n - 1
            kind = "broadcast" if last else "replicated"
            count = nxt.n_ct if last else 1
            width = self.config.model.layer_sizes[i + 1]
            cts, groups = [], []
            for r in results:
                base = len(cts)
                cts.extend(r.ciphertexts)
                order = sorted(range(len(r.entries)), key=lambda e: r.entries[e][1])
                sources = [[base + r.mark_positions[e][0], r.mark_positions[e][1]] for e in order][:width]
                groups.append({"kind": kind, "sources": sources, "padded": nxt.padded, "count": count,
                               "scale": 1.0 / h})
            fresh = self._refresh("forward", cts, groups)
            per_sample = [fresh[k * count:(k + 1) * count] for k in range(len(results))]
            poly, dpoly = self.polys[i], self.polys[i].derivative()
            mask = activation_mask(width, nxt.padded, slots, poly.coefficients[0], count, kind)

            def act(us, poly=poly, dpoly=dpoly, mask=mask):
                a = [be.add_plain(eval_poly_encrypted(u, poly, be, keys, h), mask[j]) for j, u in enumerate(us)]
                d = [eval_poly_encrypted(u, dpoly, be, keys, h) for u in us]
                return a, d

            pairs = self._map(act, per_sample)
            acts.append([a for a, _ in pairs])
            derivs.append([d for _, d in pairs])
        W = self.weights[n - 1]

        def last_layer(a):
            lvl = min(be.level(W[0]), be.level(a[0]))
            return be.mul_ct_sum([be.level_drop(c, lvl) for c in a], [be.level_drop(c, lvl) for c in W], keys)

        return self._map(last_layer, acts[-1]), {"acts": acts, "derivs": derivs}

    # ------------------------------------------------------------ backward

    def _update(self, i: int, grads: list) -> None:
        be = self.backend
        new = []
        for w, g in zip(self.weights[i], grads):
            w, g = be.align(w, g)
            new.append(be.sub(w, g))
        self.weights[i] = new

    def _backward(self, idx: np.ndarray, grads: list, cache: dict) -> None:
        be, keys = self.backend, self.keys
        mode = self.plan.mode
        if self.literal:
            if len(grads) != len(self.weights[0]):
                raise ProtocolError(f"expected {len(self.weights[0])} gradient ciphertexts, got {len(grads)}")
            self._update(0, grads)
            return
        if mode in ("dense", "scalar"):
            pw = self._packed(0)
            if mode == "dense":
                prod = batch_gradient_dense(pw, grads, cache["X"], be, keys)
            else:
                prod = scalar_gradient(pw, grads, cache["X"], be)
            self._stats.rotations += prod.rotations
            self._update(0, prod.ciphertexts)
            return
        if mode == "persample":
            if len(grads) != len(idx):
                raise ProtocolError("one gradient ciphertext per sample expected")
            data = [self.enc_samples[s] for s in idx]

            def col(k):
                lvl = min(be.level(grads[0]), be.level(data[0][k]))
                return be.mul_ct_sum([be.level_drop(g, lvl) for g in grads],
                                     [be.level_drop(d[k], lvl) for d in data], keys)

            self._update(0, self._map(col, range(len(self.weights[0]))))
            return
        self._backward_deep(idx, grads, cache)

    def _backward_deep(self, idx: np.ndarray, deltas: list, cache: dict) -> None:
        be, keys = self.backend, self.keys
        n = len(self.weights)
        slots = be.slot_count
        acts, derivs = cache["acts"], cache["derivs"]
        sizes = self.config.model.layer_sizes
        updates: dict[int, list] = {}
        # last server layer: batch layout, deltas replicated per block
        geo = self._geo(n - 1)
        W = self.weights[n - 1]
        a_last = acts[n - 1]

        def grad_col(k):
            lvl = min(be.level(deltas[0]), be.level(a_last[0][k]))
            return be.mul_ct_sum([be.level_drop(d, lvl) for d in deltas],
                                 [be.level_drop(a[k], lvl) for a in a_last], keys)

        updates[n - 1] = self._map(grad_col, range(geo.n_ct))
        width = sizes[n - 1]
        marks = fold_marks(geo, width)

        def back_last(s):
            out = []
            for k in range(geo.n_ct):
                d, w = be.align(deltas[s], W[k])
                v = be.mul_ct(d, w, keys)
                for step in geo.rotsum_steps:
                    v = be.add(v, be.rotate(v, step, keys))
                v, dv = be.align(v, derivs[n - 2][s][k])
                out.append(be.mul_ct(v, dv, keys))
            return out

        per_sample = self._map(back_last, range(len(idx)))
        self._stats.rotations += len(idx) * geo.n_ct * len(geo.rotsum_steps)
        deltas = self._regather(per_sample, [marks] * len(idx), n - 2)
        for i in range(n - 2, -1, -1):
            geo = self._geo(i)
            inputs = acts[i]
            plain = i == 0 and not self.encrypt_data

            def grad_ct(c, inputs=inputs, plain=plain, dl=deltas):
                if plain:
                    return be.mul_plain_sum([d[c] for d in dl], [x[0] for x in inputs])
                lvl = min(be.level(dl[0][c]), be.level(inputs[0][0]))
                return be.mul_ct_sum([be.level_drop(d[c], lvl) for d in dl],
                                     [be.level_drop(x[0], lvl) for x in inputs], keys)

            updates[i] = self._map(grad_ct, range(geo.n_ct))
            if i == 0:
                break
            W = self.weights[i]

            def back_hidden(s, W=W, geo=geo, i=i, dl=deltas):
                lvl = min(be.level(dl[s][0]), be.level(W[0]))
                y = be.mul_ct_sum([be.level_drop(d, lvl) for d in dl[s]], [be.level_drop(w, lvl) for w in W], keys)
                for step in geo.block_steps:
                    y = be.add(y, be.rotate(y, step, keys))
                y, dv = be.align(y, derivs[i - 1][s][0])
                return [be.mul_ct(y, dv, keys)]

            per_sample = self._map(back_hidden, range(len(idx)))
            self._stats.rotations += len(idx) * len(geo.block_steps)
            marks = [[0, m] for m in range(sizes[i])]
            deltas = self._regather(per_sample, [marks] * len(idx), i - 1)
        for i, g in updates.items():
            self._update(i, g)

    def _regather(self, per_sample: list[list], marks: list[list], target: int) -> list[list]:
        """Refresh marked deltas into the block-broadcast layout of hidden layer ``target``."""
        geo = self._geo(target)
        cts, groups = [], []
        for outs, mk in zip(per_sample, marks):
            base = len(cts)
            cts.extend(outs)
            groups.append({"kind": "broadcast", "sources": [[base + c, s] for c, s in mk],
                           "padded": geo.padded, "count": geo.n_ct, "scale": 1.0})
        fresh = self._refresh("backward", cts, groups)
        return [fresh[k * geo.n_ct:(k + 1) * geo.n_ct] for k in range(len(per_sample))]
