#!/usr/bin/env python3
"""Train, gate, sweep and report for several seeds, then print a short summary.

    python3 scripts/run_pipeline.py --seeds 0 1 2 --out runs
    python3 scripts/run_pipeline.py --config my.cfg --which layer-remove,threshold

Finished steps (manifest present) are skipped, so the script can be resumed.
"""
import argparse
import json
import sys
from pathlib import Path

from choplab import cli
from choplab.config import RunConfig, load_config


def step(cmd, args, out, h, seed, force):
    if not force and (out / f"manifest_{cmd}_{h}_{seed}.json").exists():
        print(f"  {cmd}: done already")
        return
    rc = cli.main([cmd] + args)
    if rc:
        sys.exit(f"{cmd} failed for seed {seed} (exit {rc})")


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs")
    ap.add_argument("--which", help="sweeps to run (default: the config's sweep.which)")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--force", action="store_true", help="rerun steps that already finished")
    a = ap.parse_args()

    cfg = load_config(a.config) if a.config else RunConfig()
    h, out = cfg.hash(), Path(a.out)
    summary = []
    for seed in a.seeds:
        print(f"== seed {seed} (config {h})")
        base = ["--out", str(out), "--seed", str(seed), "--workers", str(a.workers)]
        if a.config:
            base += ["--config", a.config]
        step("train-model", base, out, h, seed, a.force)
        step("train-gate", base, out, h, seed, a.force)
        step("sweep", base + (["--which", a.which] if a.which else []), out, h, seed, a.force)
        step("report", base, out, h, seed, a.force)

        row = {"seed": seed}
        test = json.loads((out / f"test_report_{h}_{seed}.json").read_text())
        row["a_mpt"] = test["a_mpt"]
        rem = out / f"sweep_layer-remove_{h}_{seed}.json"
        if rem.exists():
            row["rho"] = json.loads(rem.read_text())["echelon"].get("rho")
        thr = out / f"sweep_threshold_{h}_{seed}.json"
        if thr.exists():
            row["threshold"] = [(r["theta"], round(r["kept_fraction"], 3), round(r["report"]["overall"], 4),
                                 round(r["random_matched"]["overall"], 4))
                                for r in json.loads(thr.read_text())["rows_detail"]]
        summary.append(row)

    print("\nseed  A-MPT   rho")
    for r in summary:
        rho = r.get("rho")
        print(f"{r['seed']:>4}  {r['a_mpt']:.4f}  {'-' if rho is None else f'{rho:+.3f}'}")
        for theta, kept, acc, rand in r.get("threshold", []):
            print(f"      theta>{theta:<5g} kept {kept:.3f}  gate {acc:.4f}  random {rand:.4f}")


if __name__ == "__main__":
    main()
