"""Command-line harness: ``bwmark <command> [--config cfg.json] [--seed N] --out PATH``.

Every command is a pure function of its config and seed. Artifacts are
written next to a ``provenance.json`` (config hash, tool version, seed).
Exit codes: 0 success, 2 validation error, 3 runtime error; failures print
one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import corrmodel as cm
from . import encoder as enc
from . import exitsim as ex
from . import training as T
from .channel import ChannelModel
from .dataset import DatasetConfig, config_hash, generate_flows, load_strides, write_dataset
from .encoder import EncoderConfig
from .shaper import TokenBucketConfig, shape
from .trace import read_flow, rolling_iat, throughput_bins, write_flow
from .waveform import ModulationSpec, ValidationError

log = logging.getLogger("bwmark")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3

# model size and schedule per preset; "desk" fits a single laptop core
MODEL_PRESETS = {
    "desk": EncoderConfig(d_model=32, n_state=8, n_layers=2),
    "paper-vi-c": EncoderConfig(d_model=64, n_state=16, n_layers=2),
}


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"config is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise ValidationError("config must be a JSON object")
    return cfg


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _provenance(command: str, cfg: dict, seed) -> dict:
    return {"command": command, "config": cfg, "config_hash": config_hash(cfg), "seed": seed,
            "tool_version": __version__}


def _write_provenance(out: Path, command: str, cfg: dict, seed):
    out.mkdir(parents=True, exist_ok=True)
    (out / "provenance.json").write_text(_dump(_provenance(command, cfg, seed)))


def _require_seed(args):
    if args.seed is None:
        raise ValidationError(f"--seed is required for {args.command}")


# ---------------------------------------------------------------------------
# commands

def cmd_gen_dataset(args, cfg: dict):
    _require_seed(args)
    dcfg = DatasetConfig.from_dict(cfg)
    flows = generate_flows(dcfg, args.seed)
    out = Path(args.out)
    manifest = write_dataset(flows, dcfg, args.seed, out, __version__)
    return {"flows": len(manifest["flows"]), "counts": manifest["counts"]}


def _train_setup(args, cfg: dict):
    preset = args.preset or "desk"
    if preset not in T.PRESETS:
        raise ValidationError(f"preset {preset!r} has no training schedule")
    enc_cfg = EncoderConfig.from_dict({**MODEL_PRESETS[preset].to_dict(), **cfg.get("encoder", {})})
    X, y, ids = load_strides(args.data, enc_cfg.L_s)
    split_seed = int(cfg.get("split_seed", 0))
    train_ids, test_ids = T.split_flows(ids, y, float(cfg.get("train_frac", 0.8)), split_seed)
    pos = {fid: i for i, fid in enumerate(ids)}
    itr = np.array([pos[f] for f in train_ids])
    ite = np.array([pos[f] for f in test_ids])
    return preset, enc_cfg, X, y, itr, ite


def _stage_cfg(preset, stage, cfg: dict, seed) -> T.TrainConfig:
    base = T.PRESETS[preset][stage]
    over = {k: v for k, v in cfg.get(stage, {}).items()}
    if seed is not None:
        over["seed"] = seed
    return T.TrainConfig.from_dict({**base.to_dict(), **over, "stage": stage})


def cmd_pretrain(args, cfg: dict):
    preset, enc_cfg, X, y, itr, ite = _train_setup(args, cfg)
    tcfg = _stage_cfg(preset, "pretrain", cfg, args.seed)
    enc_cfg = replace(enc_cfg, seed=tcfg.seed)
    res = T.run_pretrain(tcfg, X[itr], enc_cfg, X_heldout=X[ite])
    out = Path(args.out)
    enc.save_checkpoint(res.params, enc_cfg, out, extra={"stage": "pretrain", "train": tcfg.to_dict()})
    (out / "loss.csv").write_text(res.loss_csv())
    (out / "heldout.json").write_text(_dump(res.eval_log))
    _write_provenance(out, "pretrain", {"preset": preset, **cfg}, tcfg.seed)
    return {"steps": tcfg.steps, "heldout_mse": [res.eval_log[0]["heldout_mse"], res.eval_log[-1]["heldout_mse"]]}


def cmd_finetune(args, cfg: dict):
    preset, enc_cfg, X, y, itr, ite = _train_setup(args, cfg)
    tcfg = _stage_cfg(preset, "finetune", cfg, args.seed)
    params = None
    if not args.from_scratch:
        if args.checkpoint is None:
            raise ValidationError("finetune needs --checkpoint (or --from-scratch)")
        params, enc_cfg, _ = enc.load_checkpoint(args.checkpoint)
    tcfg = replace(tcfg, eval_every=tcfg.eval_every or 0)
    res = T.run_finetune(params, tcfg, X[itr], y[itr], args.classes, enc_cfg, X[ite], y[ite])
    out = Path(args.out)
    enc.save_checkpoint(res.params, res.encoder_config, out,
                        extra={"stage": "finetune", "classes": args.classes, "train": tcfg.to_dict(),
                               "from_scratch": bool(args.from_scratch)})
    (out / "loss.csv").write_text(res.loss_csv())
    if res.eval_log:
        (out / "eval_log.json").write_text(_dump(res.eval_log))
    _write_provenance(out, "finetune", {"preset": preset, "classes": args.classes,
                                        "from_scratch": bool(args.from_scratch), **cfg}, tcfg.seed)
    return {"steps": len(res.losses), "final_loss": res.losses[-1] if res.losses else None}


def cmd_eval(args, cfg: dict):
    if args.checkpoint is None:
        raise ValidationError("eval needs --checkpoint")
    params, enc_cfg, _ = enc.load_checkpoint(args.checkpoint)
    n_classes = params["cls_head"].shape[1]
    if args.classes and args.classes != n_classes:
        raise ValidationError(f"checkpoint has {n_classes} classes, --classes says {args.classes}")
    _, _, X, y, itr, ite = _train_setup(args, {**cfg, "encoder": enc_cfg.to_dict()})
    rep = T.evaluate(params, X[ite], y[ite], n_classes, enc_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(rep.to_json() + "\n")
    (out / "metrics.csv").write_text(rep.to_csv())
    (out / "confusion.csv").write_text(rep.confusion_csv())
    _write_provenance(out, "eval", {"classes": n_classes, **cfg}, args.seed)
    return {"accuracy": rep.accuracy, "macro_f1": rep.macro["f1"], "weighted_f1": rep.weighted["f1"]}



def cmd_prob_table(args, cfg: dict):
    """CSV sweep of the correlation model.

    Config keys: ``p1``, ``p2`` (list), ``pi`` (optional), ``r`` (list of
    flow counts), ``T`` (list of window counts) and either ``p_exit`` (list)
    or ``n_adv`` (list) with ``network`` preset and ``adv_bandwidth``.
    """
    p1 = float(cfg.get("p1", 0.9965))
    p2 = cfg.get("p2", [0.975])
    pi = cfg.get("pi")
    rs = cfg.get("r", [1, 2, 5, 10, 20, 50, 100])
    Ts = cfg.get("T", [1])
    if "n_adv" in cfg:
        net = ex.build_scaled_network(cfg.get("network", args.preset or "paper-vi-a"))
        bw = float(cfg.get("adv_bandwidth", ex.ANCHOR_ADV_BW))
        exits = [(n, ex.inject_adversary(net, n, bw).analytic_p_exit()) for n in cfg["n_adv"]]
    else:
        exits = [("", float(p)) for p in cfg.get("p_exit", [0.0213, 0.05, 0.10])]
    K = len(p2)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["p_exit", "n_adv", "r", "T", *[f"q_{i + 1}" for i in range(K)], "q_mix",
                "P_window", "P_cumulative"])
    for (n, pe), r, t in itertools.product(exits, sorted(rs), sorted(Ts)):
        cp = cm.CorrelationParams(pe, p1, p2, pi)
        qs = [cm.per_flow_success(cp, i) for i in range(1, K + 1)]
        P = cm.corr_mixed(cp, r)
        w.writerow([f"{pe:.10g}", n, r, t, *[f"{q:.10g}" for q in qs], f"{cm.q_mixture(cp):.10g}",
                    f"{P:.10g}", f"{cm.corr_temporal_equal(P, t):.10g}"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(buf.getvalue())
    out.with_suffix(".provenance.json").write_text(
        _dump({**_provenance("prob-table", cfg, args.seed), **cm.metadata()}))
    return {"rows": buf.getvalue().count("\n") - 1}


def cmd_sim_exit(args, cfg: dict):
    _require_seed(args)
    preset = args.preset or "paper-vi-a"
    if preset not in ex.PRESETS:
        raise ValidationError(f"unknown network preset {preset!r}")
    spec = ex.NetworkSpec.from_dict({**ex.PRESETS[preset].to_dict(), **cfg.get("network", {})})
    net = ex.build_scaled_network(spec)
    trials = args.trials or int(cfg.get("trials", 14_900))
    n_values = cfg.get("n", list(range(10)))
    bw = cfg.get("adv_bandwidth", ex.ANCHOR_ADV_BW)
    rows = ex.sweep(net, n_values, bw, trials, args.seed, cfg.get("enforce_range", True))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "adv_bw_total", "p_hat", "stderr", "p_analytic"])
    for r in rows:
        w.writerow([r["n"], f"{r['adv_bw_total']:.6f}", f"{r['p_hat']:.8f}", f"{r['stderr']:.8f}",
                    f"{r['p_analytic']:.8f}"])
    (out / "sweep.csv").write_text(buf.getvalue())
    (out / "network.json").write_text(_dump(net.to_dict()))
    _write_provenance(out, "sim-exit", {"preset": preset, "trials": trials, **cfg}, args.seed)
    return {"rows": len(rows)}


def cmd_featurize(args, cfg: dict):
    if not args.trace:
        raise ValidationError("featurize needs at least one --trace file")
    bin_s = float(cfg.get("bin", 1.0))
    window = int(cfg.get("window", 10))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in args.trace:
        flow = read_flow(path)
        tp = throughput_bins(flow, bin_s)
        iat = rolling_iat(flow, window)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_start", "bytes_per_s"])
        for i, v in enumerate(tp):
            w.writerow([f"{i * bin_s:.6f}", f"{v:.6f}"])
        (out / f"{flow.flow_id}.throughput.csv").write_text(buf.getvalue())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["packet", "rolling_iat_s"])
        for i, v in enumerate(iat):
            w.writerow([i + window, f"{v:.9f}"])
        (out / f"{flow.flow_id}.iat.csv").write_text(buf.getvalue())
    _write_provenance(out, "featurize", {"bin": bin_s, "window": window,
                                         "traces": [Path(p).name for p in args.trace]}, args.seed)
    return {"flows": len(args.trace)}


def cmd_shape_trace(args, cfg: dict):
    """Shape one trace (and optionally send it through a channel)."""
    if not args.trace or len(args.trace) != 1:
        raise ValidationError("shape-trace needs exactly one --trace file")
    flow = read_flow(args.trace[0])
    spec = ModulationSpec.from_dict(cfg.get("modulation", {"kind": "Natural"}))
    bucket = TokenBucketConfig(**cfg.get("bucket", {}))
    flow = shape(flow, spec, bucket)
    if "channel" in cfg:
        from .channel import transmit
        ch = ChannelModel.from_dict({**cfg["channel"], **({"seed": args.seed} if args.seed is not None else {})})
        flow = transmit(flow, ch)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_flow(flow, out)
    out.with_suffix(".provenance.json").write_text(_dump(_provenance("shape-trace", cfg, args.seed)))
    return {"packets": len(flow)}


COMMANDS = {
    "gen-dataset": cmd_gen_dataset,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "prob-table": cmd_prob_table,
    "sim-exit": cmd_sim_exit,
    "featurize": cmd_featurize,
    "shape-trace": cmd_shape_trace,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bwmark", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True)
        p.add_argument("--preset", choices=["paper-vi-a", "paper-vi-c", "desk"])
        if name in ("pretrain", "finetune", "eval"):
            p.add_argument("--data", required=True, help="dataset directory from gen-dataset")
            p.add_argument("--classes", type=int, choices=[2, 4], default=4 if name != "eval" else None)
        if name in ("finetune", "eval"):
            p.add_argument("--checkpoint")
        if name == "finetune":
            p.add_argument("--from-scratch", action="store_true")
        if name == "sim-exit":
            p.add_argument("--trials", type=int)
        if name in ("featurize", "shape-trace"):
            p.add_argument("--trace", action="append", default=[])
    return ap


def _override(cfg: dict, args) -> dict:
    # top-level keys given as flags take precedence over the file
    cfg = dict(cfg)
    if getattr(args, "trials", None) is not None:
        cfg["trials"] = args.trials
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)  # bitwise-reproducible reductions
    try:
        cfg = _override(_load_config(args.config), args)
        summary = COMMANDS[args.command](args, cfg)
    except (ValidationError, ValueError, TypeError, KeyError, FileNotFoundError) as e:
        kind = type(e).__name__
        print(json.dumps({"error": kind, "message": str(e), "command": args.command}), file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001
        print(json.dumps({"error": type(e).__name__, "message": str(e), "command": args.command}),
              file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"command": args.command, "out": args.out, **(summary or {})}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
