"""Command line entry point: ``choplab <command> --config FILE [--seed N] [--out DIR]``.

Commands
  train-model     train the encoder, save the best-validation checkpoint
  train-gate      train the chopping gate on a frozen encoder checkpoint
  sweep           run chopping sweeps and write CSV/JSON plus text heatmaps
  report          per-type evaluation of the full and gated model, mean gate scores
  dump-attention  write one test instance's attention maps as CSV

Artifacts are named ``<name>_<confighash>_<seed>.<ext>`` inside ``--out``.

Exit codes: 0 ok, 3 config error, 4 checkpoint error, 5 divergence, 6 I/O error.
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, ablation
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .encoder import EncoderParams, init_params, load_encoder, save_encoder
from .gate import GateParams, gated_forward, load_gate, mean_scores_by_type, save_gate, train_gate
from .numerics import NonFiniteError
from .results import AblationMatrix, _jsonable, render_heatmap
from .seeding import rng_for
from .training import Divergence, train_model

log = logging.getLogger("choplab")

EXIT_OK, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_DIVERGENCE, EXIT_IO = 0, 3, 4, 5, 6


class Run:
    """Per-invocation context: resolved config, seed, output dir and the manifest being built."""

    def __init__(self, command: str, cfg: RunConfig, seed: int, out: Path, workers: int):
        self.command, self.cfg, self.seed, self.out, self.workers = command, cfg, seed, out, workers
        self.hash = cfg.hash()
        self.artifacts: list[str] = []
        self.metrics: dict = {}
        self.started = _now()
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str, ext: str) -> Path:
        return self.out / f"{name}_{self.hash}_{self.seed}.{ext}"

    def emit(self, *paths) -> None:
        for p in paths:
            self.artifacts.append(Path(p).name)

    def meta(self) -> dict:
        return {"config_hash": self.hash, "seed": self.seed, "run_config": self.cfg.to_dict()}

    def write_manifest(self) -> Path:
        man = {"command": self.command, "config_hash": self.hash, "code_version": __version__,
               "seed": self.seed, "started": self.started, "finished": _now(),
               "artifacts": sorted(self.artifacts), "metrics": self.metrics}
        path = self.path(f"manifest_{self.command}", "json")
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(_jsonable(man), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)
        return path


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def _check_meta(run: Run, meta: dict, what: str) -> None:
    if meta.get("config_hash") != run.hash or meta.get("seed") != run.seed:
        raise CheckpointError(f"{what} checkpoint was made with config {meta.get('config_hash')} "
                              f"seed {meta.get('seed')}, expected {run.hash} seed {run.seed}")


def _load_model(run: Run, path=None) -> EncoderParams:
    params, meta = load_encoder(path or run.path("model", "ckpt"))
    _check_meta(run, meta, "model")
    return params


def _load_gate(run: Run, path=None) -> GateParams:
    path = Path(path or run.path("gate", "ckpt"))
    if not path.exists():
        raise CheckpointError(f"gate checkpoint {path} not found; run train-gate first")
    gate, meta = load_gate(path)
    _check_meta(run, meta, "gate")
    return gate


# commands -------------------------------------------------------------------

def cmd_train_model(run: Run, args) -> None:
    data = run.cfg.dataset(run.seed)
    params = init_params(run.cfg.encoder_config(), rng_for(run.seed, "encoder/init"))
    try:
        res = train_model(params, data.split("train"), data.split("val"), run.cfg.train, run.seed)
    except Divergence as exc:
        if exc.last_good is not None:
            p = save_encoder(run.path("model_lastgood", "ckpt"), exc.last_good, run.meta())
            run.emit(p)
        raise
    names = ablation.type_names(data)
    hist = run.path("train_history", "csv")
    with open(hist, "w") as fh:
        fh.write("step,train_loss,lr,val_acc," + ",".join(names[t] for t in data.type_ids) + "\n")
        for r in res.history:
            fh.write(f"{r['step']},{r['train_loss']!r},{r['lr']!r},{r['val_acc']!r},"
                     + ",".join(repr(r["val_per_type"][t]) for t in data.type_ids) + "\n")
    ck = save_encoder(run.path("model", "ckpt"), res.params, dict(run.meta(), best_step=res.best_step))
    report = ablation.eval_by_type(res.params, None, data.split("test"))
    rep = _write_json(run.path("test_report", "json"), report.to_dict())
    run.emit(ck, hist, rep)
    run.metrics.update(best_step=res.best_step, test=report.to_dict())
    print(f"test accuracy {report.a_mpt:.4f} (A-MPT) best step {res.best_step} -> {ck}")


def cmd_train_gate(run: Run, args) -> None:
    params = _load_model(run, args.model)
    data = run.cfg.dataset(run.seed)
    g = run.cfg.gate
    gate = GateParams.for_encoder(params, per_layer=g.per_layer, lam=g.lam)
    res = train_gate(data.split("train"), params, gate, run.cfg.gate_hyper(), run.seed)
    ck = save_gate(run.path("gate", "ckpt"), res.gate, run.meta())
    hist = run.path("gate_history", "csv")
    with open(hist, "w") as fh:
        fh.write("step,loss,bce,mean_score\n")
        for r in res.history:
            fh.write(f"{r['step']},{r['loss']!r},{r['bce']!r},{r['mean_score']!r}\n")
    run.emit(ck, hist)
    run.metrics["final_loss"] = res.history[-1]["loss"] if res.history else None
    print(f"gate saved -> {ck}")


def _emit_matrix(run: Run, name: str, m: AblationMatrix, sidecar: dict) -> None:
    csv_path, js = m.write(run.path(name, "csv"), dict(sidecar, config_hash=run.hash, seed=run.seed))
    txt = run.path(name, "txt")
    txt.write_text(render_heatmap(m, name))
    run.emit(csv_path, js, txt)
    print(render_heatmap(m, name))


def cmd_sweep(run: Run, args) -> None:
    which = args.which.split(",") if args.which else list(run.cfg.sweep.which)
    params = _load_model(run, args.model)
    test = run.cfg.dataset(run.seed).split("test")
    depths = [s.depth for s in run.cfg.specs()]
    fns = {"layer-remove": ablation.remove_one_layer_sweep, "layer-keep": ablation.keep_one_layer_sweep,
           "head-remove": ablation.remove_one_head_sweep, "head-keep": ablation.keep_one_head_sweep}
    for name in which:
        if name == "threshold":
            gate = _load_gate(run, args.gate)
            grid = ([float(x) for x in args.threshold.split(",")] if args.threshold
                    else run.cfg.sweep.thresholds)
            ts = ablation.threshold_sweep(params, gate, test, grid, seed=run.seed)
            _emit_matrix(run, "sweep_threshold", ts.table(),
                         {"rows_detail": [r.to_dict() for r in ts.rows], "full": ts.full.to_dict()})
            run.metrics["threshold"] = [{"theta": r.theta, "a_mpt": r.report.a_mpt,
                                         "kept_fraction": r.kept_fraction,
                                         "random_a_mpt": r.random_report.a_mpt} for r in ts.rows]
            continue
        if name not in fns:
            raise ConfigError(f"unknown sweep {name!r}")
        res = fns[name](params, test, workers=run.workers, meta={"config_hash": run.hash})
        side = {"baseline": res.baseline.to_dict(), "evaluations": res.n_evaluations}
        if name.startswith("layer"):
            try:
                ech = ablation.echelon_statistic(res.matrix, depths)
                side["echelon"] = {"centroids": ech.centroids, "rho": ech.rho}
                run.metrics[f"{name}_rho"] = ech.rho
            except ValueError as exc:
                side["echelon"] = {"error": str(exc)}
        _emit_matrix(run, f"sweep_{name}", res.matrix, side)
        if res.per_head is not None:
            _emit_matrix(run, f"sweep_{name}_per_head", res.per_head_matrix(), {})


def cmd_report(run: Run, args) -> None:
    params = _load_model(run, args.model)
    test = run.cfg.dataset(run.seed).split("test")
    out = {"full": ablation.eval_by_type(params, None, test).to_dict()}
    gate_path = Path(args.gate or run.path("gate", "ckpt"))
    if gate_path.exists():
        gate = _load_gate(run, gate_path)
        scores = mean_scores_by_type(test, params, gate, ablation.type_names(test))
        _emit_matrix(run, "gate_scores", scores, {})
        theta = args.threshold if args.threshold is not None else 0.5
        theta = float(str(theta).split(",")[0])
        preds, counts = [], []
        for i in range(0, len(test), 512):
            o = gated_forward(test.tokens[i:i + 512], params, gate, theta)
            preds.append(o.logits.argmax(-1))
            counts.append(o.skip_counts)
        rep = ablation.report_from_predictions(np.concatenate(preds), test)
        kept, _ = ablation._instance_kept(params, np.concatenate(counts))
        out["gated"] = dict(rep.to_dict(), theta=theta, kept_fraction=kept)
    path = _write_json(run.path("report", "json"), out)
    run.emit(path)
    run.metrics.update(out)
    print(json.dumps(_jsonable(out), indent=2, sort_keys=True))


def cmd_dump_attention(run: Run, args) -> None:
    params = _load_model(run, args.model)
    test = run.cfg.dataset(run.seed).split("test")
    if not 0 <= args.index < len(test):
        raise ConfigError(f"--index must be in [0, {len(test)})")
    tokens = test.tokens[args.index]
    plan = None
    if args.threshold is not None:
        gate = _load_gate(run, args.gate)
        plan = gated_forward(tokens[None, :], params, gate, float(args.threshold)).plans[0]
    path = ablation.dump_attention(params, plan, tokens, run.path(f"attention_{args.index}", "csv"),
                                   heads=args.heads)
    run.emit(path)
    print(f"attention -> {path}")


COMMANDS = {"train-model": cmd_train_model, "train-gate": cmd_train_gate, "sweep": cmd_sweep,
            "report": cmd_report, "dump-attention": cmd_dump_attention}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="choplab", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file (defaults used when omitted)")
        p.add_argument("--seed", type=int, help="overrides run.seed")
        p.add_argument("--out", help="output directory, overrides run.out_dir")
        p.add_argument("--workers", type=int,
                       help="parallel sweep workers (default $CHOPLAB_WORKERS or 1)")
        p.add_argument("--threshold", help="gate threshold (sweep: comma list overriding the grid)")
        if name != "train-model":
            p.add_argument("--model", help="encoder checkpoint (default from --out)")
        if name in ("sweep", "report", "dump-attention"):
            p.add_argument("--gate", help="gate checkpoint (default from --out)")
        if name == "sweep":
            p.add_argument("--which", help="comma list overriding sweep.which")
        if name == "dump-attention":
            p.add_argument("--index", type=int, default=0, help="test-split instance index")
            p.add_argument("--heads", choices=("mean", "all"), default="mean")
    return ap


def _workers(flag) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get("CHOPLAB_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"CHOPLAB_WORKERS={env!r} is not an integer") from None
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.threshold is not None and args.command != "sweep":
            try:
                float(args.threshold)
            except ValueError:
                raise ConfigError(f"--threshold {args.threshold!r} is not a number") from None
        seed = cfg.run.seed if args.seed is None else args.seed
        out = Path(args.out or cfg.run.out_dir)
        run = Run(args.command, cfg, seed, out, _workers(args.workers))
        COMMANDS[args.command](run, args)
        run.write_manifest()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (Divergence, NonFiniteError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
