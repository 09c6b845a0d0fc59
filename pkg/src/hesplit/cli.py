"""Command-line entry point: protocol roles, plaintext baseline, estimator, microbenchmarks.

Every flag is an override of a config key, so both parties hash the same
canonical config in the handshake.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .data_io import load_dataset
from .estimator import (
    EstimateRequest, MicrobenchProfile, estimate_epoch, load_profile, machine_id, run_microbench, save_profile,
)
from .neuralnet import evaluate, init_model, save_checkpoint, train_plain
from .protocol import (
    Channel, ClientSession, LocalRun, ProtocolError, ServerSession, TcpTransport, backend_from_config,
    parse_address, run_local,
)
from .protocol.common import version_string

log = logging.getLogger("hesplit")

FLAG_KEYS = {
    "backend": "crypto.backend",
    "batch_size": "protocol.batch_size",
    "epochs": "protocol.epochs",
    "seed": "protocol.seed",
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for flag, key in FLAG_KEYS.items():
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = val
    for item in args.set or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key] = _parse_value(val)
    return config.with_overrides(overrides) if overrides else config


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


class RunDir:
    """Run directory: config snapshot, version, seeds, machine profile, metrics, summary."""

    def __init__(self, root: str | Path, role: str, config: RunConfig):
        stamp = time.strftime("%Y%m%d-%H%M%S")
        base = Path(root) / f"{stamp}-{role}"
        path, k = base, 1
        while path.exists():
            path, k = Path(f"{base}-{k}"), k + 1
        path.mkdir(parents=True)
        self.path = path
        (path / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        (path / "version.txt").write_text(f"{version_string()}\ngit {_git_describe()}\n")
        seeds = {"model.init_seed": config.model.init_seed, "crypto.seed": config.crypto.seed,
                 "protocol.seed": config.protocol.seed, "data.seed": config.data.get("seed")}
        (path / "seeds.json").write_text(json.dumps(seeds, indent=2))
        params = config.crypto_params()
        profile = load_profile(params)
        machine = {"machine_id": machine_id(), "platform": platform.platform(), "python": platform.python_version(),
                   "cpu_count": os.cpu_count(), "numpy": np.__version__,
                   "profile": profile.to_dict() if profile else None}
        (path / "machine.json").write_text(json.dumps(machine, indent=2))
        self._metrics = open(path / "metrics.jsonl", "a")

    def metric(self, record: dict) -> None:
        self._metrics.write(json.dumps(record, sort_keys=True) + "\n")
        self._metrics.flush()

    def summary(self, record: dict) -> None:
        (self.path / "summary.json").write_text(json.dumps(record, indent=2, sort_keys=True))
        self._metrics.close()


def _profile_for(config: RunConfig, reps: int | None = None) -> MicrobenchProfile:
    params = config.crypto_params()
    profile = load_profile(params)
    if profile is None:
        profile = run_microbench(params, reps or max(10, min(config.estimator.reps, 20)))
        save_profile(profile)
    return profile


def _estimate_report(config: RunConfig, samples: int):
    req = EstimateRequest.from_config(config, samples)
    return estimate_epoch(req, _profile_for(config))


# ---------------------------------------------------------------- commands


def cmd_estimate(args) -> int:
    config = load_config(args)
    samples = config.estimator.samples
    if samples is None:
        samples = load_dataset(config.data).n_samples
    report = _estimate_report(config, samples)
    print(report.to_table())
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        out = Path(args.out_dir) / "estimate.json"
        out.write_text(report.to_json())
        print(f"report written to {out}")
    return 0


def cmd_bench(args) -> int:
    config = load_config(args)
    params = config.crypto_params()
    profile = run_microbench(params, args.reps or config.estimator.reps)
    path = save_profile(profile, Path(args.cache_dir) if args.cache_dir else None)
    for op in ("rot", "encode", "encrypt", "mulplain", "mulscalar", "mulct", "add", "decrypt", "decode"):
        t = getattr(profile, f"t_{op}")
        print(f"{op:>10}  {t * 1e3:10.4f} ms  (MAD {profile.mad.get(op, 0.0) * 1e3:.4f} ms)")
    print(f"mul_ct / mul_scalar time ratio: {profile.scalar_speedup:.2f}")
    print(f"profile written to {path}")
    return 0


def cmd_baseline(args) -> int:
    config = load_config(args)
    ds = load_dataset(config.data)
    m, p = config.model, config.protocol
    model = init_model(m.layer_sizes, config.activations(), m.init_seed)
    run = RunDir(args.out_dir, "baseline", config) if args.out_dir else None
    if p.epochs == 0:
        history = [evaluate(model, ds.features, ds.labels, m.loss)]
    else:
        model, history = train_plain(model, ds.features, ds.labels, p.epochs, p.batch_size, p.learning_rate,
                                     m.loss, p.seed, p.shuffle)
    for h in history:
        rec = {"epoch": h.epoch, "loss": h.loss, "accuracy": h.accuracy}
        print(json.dumps(rec))
        if run:
            run.metric(rec)
    final = evaluate(model, ds.features, ds.labels, m.loss)
    summary = {"role": "baseline", "train_accuracy": final.accuracy, "train_loss": final.loss,
               "epochs": p.epochs, "samples": ds.n_samples}
    print(f"final train accuracy {final.accuracy:.4f}")
    if run:
        save_checkpoint(run.path / "model.ckpt", model.weights, config.digest())
        run.summary(summary)
    return 0


def _emit_epochs(run: RunDir | None, metrics: list[dict], role: str) -> None:
    for rec in metrics:
        line = {"role": role, **rec}
        if run:
            run.metric(line)
        srv = rec.get("server", {})
        log.info("epoch %s loss %.5f accuracy %.4f wall %.2fs rotations %s refreshes %s",
                 rec.get("epoch"), rec.get("loss", float("nan")), rec.get("accuracy", float("nan")),
                 srv.get("wall_time", rec.get("wall_time", 0.0)), srv.get("rotations"), srv.get("refresh_rounds"))


def _train_summary(config: RunConfig, ds, model, metrics: list[dict], role: str, elapsed: float) -> dict:
    final = evaluate(model, ds.features, ds.labels, config.model.loss) if model is not None else None
    return {
        "role": role, "epochs": config.protocol.epochs, "samples": ds.n_samples, "wall_time": elapsed,
        "train_accuracy_running": metrics[-1]["accuracy"] if metrics else None,
        "train_accuracy": final.accuracy if final else None,
        "train_loss": final.loss if final else None,
        "config_digest": config.digest().hex(),
    }


def _dry_run(config: RunConfig, ds) -> int:
    print(_estimate_report(config, ds.n_samples).to_table())
    return 0


def cmd_run(args) -> int:
    config = load_config(args)
    role = "local" if args.local else args.role
    if role is None:
        raise ConfigError("choose --role server|client or --local")
    ds = load_dataset(config.data)
    if args.dry_run:
        return _dry_run(config, ds)
    run = RunDir(args.out_dir, role, config) if args.out_dir else None
    t0 = time.perf_counter()
    enc = config.protocol.encrypt_data
    if role == "local":
        result = run_local(config, ds, threads=args.threads)
        _emit_epochs(run, result.client.metrics, "local")
        model = result.model
        summary = _train_summary(config, ds, model, result.client.metrics, role, time.perf_counter() - t0)
    elif role == "server":
        host, port = parse_address(args.listen or "127.0.0.1:7337")
        log.info("server listening on %s:%d", host, port)
        transport = TcpTransport.listen(host, port, timeout=config.protocol.timeout)
        features = None if enc else ds.features
        del ds  # labels stay with the client
        session = ServerSession(config, features, Channel(transport, None, config.protocol.timeout),
                                backend_from_config(config, 1), args.threads)
        try:
            res = session.run()
        finally:
            transport.close()
        metrics = [{**c, "server": s.to_dict()} for s, c in zip(res.stats, res.client_metrics)]
        _emit_epochs(run, metrics, "server")
        summary = {"role": "server", "epochs": config.protocol.epochs, "updates": res.updates,
                   "wall_time": time.perf_counter() - t0, "levels": res.levels,
                   "config_digest": config.digest().hex()}
    else:
        host, port = parse_address(args.connect or "127.0.0.1:7337")
        transport = TcpTransport.connect(host, port)
        session = ClientSession(config, ds.labels, Channel(transport, None, config.protocol.timeout),
                                backend_from_config(config, 2), ds.features if enc else None)
        try:
            res = session.run()
        finally:
            transport.close()
        _emit_epochs(run, res.metrics, "client")
        model = LocalRun(None, res, config).model  # type: ignore[arg-type]
        summary = _train_summary(config, ds, model, res.metrics, role, time.perf_counter() - t0)
    if role != "server":
        print(f"final train accuracy {summary['train_accuracy']:.4f}")
        if run:
            save_checkpoint(run.path / "model.ckpt", model.weights, config.digest())
    if run:
        run.summary(summary)
        print(f"run directory: {run.path}")
    return 0


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config with sections model, crypto, protocol, data, estimator")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key, e.g. model.split_index=2")
    p.add_argument("--backend", choices=["ckks", "noise-sim"])
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, help="protocol seed (batch order)")
    p.add_argument("--out-dir", help="write a run directory here")
    p.add_argument("--threads", type=int, default=1, help="worker cap for per-ciphertext server work")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hesplit", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=version_string())
    sub = ap.add_subparsers(dest="command", required=True)
    for name, role in (("run", None), ("server", "server"), ("client", "client"), ("local", "local")):
        p = sub.add_parser(name, help="train with the split protocol" if name == "run" else f"run the {name} role")
        _common(p)
        p.add_argument("--role", choices=["server", "client", "local"], default=role)
        p.add_argument("--listen", help="server address host:port")
        p.add_argument("--connect", help="client peer address host:port")
        p.add_argument("--local", action="store_true", default=role == "local",
                       help="both roles in one process over an in-memory pipe")
        p.add_argument("--dry-run", action="store_true", help="print the estimator report and exit")
        p.set_defaults(fn=cmd_run)
    p = sub.add_parser("baseline", help="monolithic plaintext training with the same seeds")
    _common(p)
    p.set_defaults(fn=cmd_baseline)
    p = sub.add_parser("estimate", help="estimator report for every candidate split")
    _common(p)
    p.set_defaults(fn=cmd_estimate)
    p = sub.add_parser("bench", help="microbenchmark the crypto parameters and cache the profile")
    _common(p)
    p.add_argument("--reps", type=int)
    p.add_argument("--cache-dir")
    p.set_defaults(fn=cmd_bench)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except (ConfigError, ProtocolError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
