"""Command-line front end.

Every command writes its outputs atomically and a ``<output>.manifest.json``
next to the main output describing the resolved config, seeds and input
digests. Failures print one JSON line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import glob as globlib
import hashlib
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__, config, nn
from .bench import BUNDLED_CORPUS, build_pools, load_pools
from .checkpoint import CheckpointFormatError, atomic_write
from .decode import run_bench, simulate_decode
from .host import HostConfig, train_host, windows
from .metrics import aggregate_report, cross_head_consensus, render_table, to_csv, topk_classification_accuracy
from .predictor import PredictorConfig, size_for_budget
from .sparsity import POLICY_NAMES, PolicyConfig, PolicyError
from .store import load_butler, load_host, save_butler, save_host
from .trainer import TrainConfig, train_predictor


class CliError(Exception):
    pass


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _threads() -> int:
    raw = os.environ.get("BUTLER_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"BUTLER_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _write_text(path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


def _manifest(args, command: str, values: dict, inputs: dict, outputs: list[str], seeds: dict) -> None:
    manifest = {
        "command": command,
        "config": values,
        "seeds": seeds,
        "inputs": {k: _digest(v) for k, v in sorted(inputs.items()) if v},
        "outputs": outputs,
        "version": __version__,
    }
    _write_text(f"{outputs[0]}.manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _values(args, extra: dict | None = None) -> dict:
    overrides = {"seed": getattr(args, "seed", None)}
    overrides.update(extra or {})
    return config.load(getattr(args, "config", None), overrides)


def _policy_cfg(values: dict, sparsity: float) -> PolicyConfig:
    p = config.section(values, "policy")
    return PolicyConfig(
        sparsity=sparsity,
        anchors=p["anchors"],
        window=p["window"] or None,
        obs_window=p["obs_window"],
        page_size=p["page_size"],
        pooling=p["pooling"],
    )


def _corpus(path) -> tuple[str, Path]:
    p = Path(path) if path else BUNDLED_CORPUS
    return p.read_text(encoding="utf-8"), p


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ------------------------------------------------------------------ commands


def cmd_train_host(args) -> None:
    values = _values(args, {"host.steps": args.steps})
    h = config.section(values, "host")
    text, corpus_path = _corpus(args.corpus)
    cfg = HostConfig(n_layers=h["n_layers"], n_heads=h["n_heads"], embed_dim=h["embed_dim"], head_dim=h["head_dim"], max_len=h["max_len"])
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    res = train_host(
        text, cfg, steps=h["steps"], seed=values["seed"], batch_size=h["batch_size"], seq_len=h["seq_len"], lr=h["lr"], log_every=250, log=log
    )
    meta = {"seed": values["seed"], "step": h["steps"], "initial_ppl": res.initial_ppl, "final_ppl": res.final_ppl}
    save_host(args.out, res.model, res.tokenizer, meta)
    _manifest(args, "train-host", values, {"corpus": corpus_path}, [args.out], {"host-init": values["seed"], "batch-order": values["seed"]})
    _emit({"out": args.out, "params": res.model.param_count(), **meta})


def cmd_train_butler(args) -> None:
    values = _values(args, {"train.steps": args.steps})
    host, tok, ck = load_host(args.host)
    text, corpus_path = _corpus(args.corpus)
    b, t = config.section(values, "butler"), config.section(values, "train")
    if b["inter_dim"] and b["reduced_dim"] and b["hidden"]:
        pcfg = PredictorConfig(b["reduced_dim"], b["inter_dim"], b["n_heads"], b["hidden"])
    else:
        pcfg = size_for_budget(host.cfg, b["target_ratio"], host.param_count(), n_heads=b["n_heads"])
    tcfg = TrainConfig(
        steps=t["steps"],
        batch_size=t["batch_size"],
        seq_len=t["seq_len"],
        lr=t["lr"],
        block_size=t["block_size"],
        seed=values["seed"],
        domain=t["domain"],
        loss_path=t["loss_path"],
    )
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    res = train_predictor(host, tok, text, pcfg, tcfg, log_every=100, log=log)
    tail = res.reports[-min(100, len(res.reports)) :]
    meta = {
        "seed": values["seed"],
        "step": tcfg.steps,
        "final_mse": sum(r.mse for r in tail) / max(1, len(tail)),
        "ratio": res.predictor.param_count() / host.param_count(),
    }
    save_butler(args.out, res.predictor, ck.config_text, meta)
    _manifest(
        args, "train-butler", values, {"corpus": corpus_path, "host": args.host}, [args.out], {"butler-init": values["seed"], "butler-batches": values["seed"]}
    )
    _emit({"out": args.out, "params": res.predictor.param_count(), **meta})


def _load_pair(args):
    host, tok, ck = load_host(args.host)
    pred = None
    if getattr(args, "butler", None):
        pred, _ = load_butler(args.butler, host, ck.config_text)
    return host, tok, ck, pred


def cmd_eval_classify(args) -> None:
    values = _values(args)
    host, tok, _, pred = _load_pair(args)
    if pred is None:
        raise CliError("eval-classify needs --butler")
    text = Path(args.split).read_text(encoding="utf-8")
    seqs = windows(tok, text, min(args.length, host.cfg.max_len))[: args.windows]
    if not seqs:
        raise CliError("split file yields no evaluation windows")
    trace = host.trace_batch(seqs)
    import numpy as np

    a_true = np.stack([trace.sequence(i).sparse_logits for i in range(len(seqs))])
    a_pred = np.stack([pred.predict_importance(trace.hidden[i]) for i in range(len(seqs))])
    acc = topk_classification_accuracy(a_true, a_pred, args.fraction)
    result = {"topk_accuracy": acc, "fraction": args.fraction, "windows": len(seqs), "length": len(seqs[0])}
    if args.out:
        _write_text(args.out, json.dumps(result, sort_keys=True) + "\n")
        _manifest(args, "eval-classify", values, {"host": args.host, "butler": args.butler, "split": args.split}, [args.out], {})
    _emit(result)


def _check_policy(args, pred) -> None:
    if args.policy not in POLICY_NAMES:
        raise PolicyError(f"unknown policy {args.policy!r}; choose from {', '.join(POLICY_NAMES)}")
    if args.policy == "butler" and pred is None:
        raise PolicyError("policy 'butler' needs --butler")


def cmd_bench(args) -> None:
    values = _values(args)
    host, tok, _, pred = _load_pair(args)
    _check_policy(args, pred)
    pools = load_pools(args.pools) if args.pools else build_pools(values["bench.pool_seed"])
    pcfg = _policy_cfg(values, args.sparsity)
    seeds = list(range(args.seed, args.seed + args.samples))

    def one(s):
        return run_bench(host, tok, pools, args.policy, pcfg, 1, s, pred)[0]

    with ThreadPoolExecutor(max_workers=_threads()) as ex:
        rows = list(ex.map(one, seeds))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_seed", "policy", "sparsity", "accuracy", "coverage"])
    for r in rows:
        w.writerow([r.sample_seed, r.policy, repr(float(r.sparsity)), r.accuracy, repr(float(r.coverage))])
    acc = sum(r.accuracy for r in rows) / len(rows)
    cov = sum(r.coverage for r in rows) / len(rows)
    w.writerow(["summary", args.policy, repr(float(args.sparsity)), repr(acc), repr(cov)])
    out = args.out
    if out:
        _write_text(out, buf.getvalue())
        inputs = {"host": args.host, "butler": args.butler, "pools": args.pools}
        _manifest(args, "bench", values, inputs, [out], {"bench-pools": values["bench.pool_seed"], "bench-samples": args.seed})
        _emit({"out": out, "samples": len(rows), "accuracy": acc, "coverage": cov})
    else:
        sys.stdout.write(buf.getvalue())


def cmd_simulate(args) -> None:
    values = _values(args)
    host, tok, _, pred = _load_pair(args)
    _check_policy(args, pred)
    text = Path(args.input).read_text(encoding="utf-8")
    seqs = windows(tok, text, min(args.length, host.cfg.max_len))[: args.sequences]
    if not seqs:
        raise CliError("input yields no sequences")
    pcfg = _policy_cfg(values, args.sparsity)

    def one(s):
        return simulate_decode(s, args.policy, host, pred, pcfg, args.seed).to_json()

    with ThreadPoolExecutor(max_workers=_threads()) as ex:
        lines = list(ex.map(one, seqs))
    body = "".join(line + "\n" for line in lines)
    if args.out:
        _write_text(args.out, body)
        _manifest(args, "simulate", values, {"host": args.host, "butler": args.butler, "input": args.input}, [args.out], {"policy": args.seed})
    sys.stdout.write(body)


def cmd_consensus(args) -> None:
    values = _values(args)
    host, tok, _, _ = _load_pair(args)
    text = Path(args.input).read_text(encoding="utf-8")
    seqs = windows(tok, text, min(args.length, host.cfg.max_len))[: args.sequences]
    traces = [host.forward_traced(s)[1] for s in seqs]
    cm = cross_head_consensus(traces)
    result = {"mean": cm.mean, "sequences": cm.sequences, "heads": len(cm.matrix), "flagged": [list(p) for p in cm.flagged]}
    if args.out:
        _write_text(args.out, json.dumps(result, sort_keys=True) + "\n")
        outputs = [args.out]
        if args.grid:
            _write_text(args.grid, cm.to_csv())
            outputs.append(args.grid)
        _manifest(args, "consensus", values, {"host": args.host, "input": args.input}, outputs, {})
    _emit(result)


def _read_records(path: str) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    if path.endswith(".jsonl"):
        return [json.loads(line) for line in text.splitlines() if line.strip()]
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        if row.get("sample_seed") == "summary":
            continue
        out.append({k: _number(v) for k, v in row.items()})
    return out


def _number(v: str):
    for typ in (int, float):
        try:
            return typ(v)
        except ValueError:
            pass
    return v


def cmd_report(args) -> None:
    paths = sorted(p for p in globlib.glob(args.glob) if not p.endswith(".manifest.json"))
    if not paths:
        raise CliError(f"no files match {args.glob!r}")
    records = [r for p in paths for r in _read_records(p)]
    summary = aggregate_report(records)
    _write_text(args.out, to_csv(summary))
    _manifest(args, "report", {}, {p: p for p in paths}, [args.out], {})
    sys.stdout.write(render_table(summary, [k for k in ("accuracy", "coverage") if summary and k in summary[0]] or ["net_sparsity"], percent=True))


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="butlerlab", description="Token-importance predictor experiments on a toy decoder.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="flat key = value config file")
        if seed:
            p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train-host", help="train and checkpoint the host model")
    common(p)
    p.add_argument("--corpus", help="training text (default: bundled corpus)")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_train_host)

    p = sub.add_parser("train-butler", help="train the importance predictor against a frozen host")
    common(p)
    p.add_argument("--host", required=True)
    p.add_argument("--corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_train_butler)

    p = sub.add_parser("eval-classify", help="top-fraction token classification accuracy")
    common(p, seed=False)
    p.add_argument("--host", required=True)
    p.add_argument("--butler", required=True)
    p.add_argument("--split", required=True, help="held-out text file")
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--windows", type=int, default=16)
    p.add_argument("--length", type=int, default=256)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_classify)

    p = sub.add_parser("bench", help="co-reference retrieval benchmark")
    common(p, seed=False)
    p.add_argument("--host", required=True)
    p.add_argument("--butler")
    p.add_argument("--policy", required=True)
    p.add_argument("--sparsity", type=float, required=True)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pools", help="JSON pool override file")
    p.add_argument("--out", help="CSV output (default: stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("simulate", help="decode simulation, one JSON line per sequence")
    common(p, seed=False)
    p.add_argument("--host", required=True)
    p.add_argument("--butler")
    p.add_argument("--policy", required=True)
    p.add_argument("--sparsity", type=float, required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--sequences", type=int, default=1)
    p.add_argument("--length", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="JSON-lines output")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("consensus", help="cross-head consensus of final-row logits")
    common(p, seed=False)
    p.add_argument("--host", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--sequences", type=int, default=16)
    p.add_argument("--length", type=int, default=256)
    p.add_argument("--out")
    p.add_argument("--grid", help="dense CSV dump of the matrix")
    p.set_defaults(func=cmd_consensus)

    p = sub.add_parser("report", help="aggregate JSON-lines / CSV results")
    p.add_argument("--glob", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


_EXPECTED = (CliError, PolicyError, CheckpointFormatError, config.ConfigError, ValueError, KeyError, OSError, ArithmeticError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    nn.tune_allocator()
    try:
        if getattr(args, "sparsity", None) is not None and not 0.0 <= args.sparsity < 1.0:
            raise CliError("--sparsity must lie in [0, 1)")
        args.func(args)
    except _EXPECTED as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        field = getattr(exc, "field", None)
        err = {"error": type(exc).__name__, "message": str(msg)}
        if field:
            err["field"] = field
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
