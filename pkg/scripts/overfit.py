"""Overfit a tiny model on a synthetic clothing-change set through the CLI.

    python3 scripts/overfit.py --out /tmp/overfit [--seed 0]
"""

import argparse
import json
import time
from pathlib import Path

from asgl import cli

TINY = """\
refine_dims = 4, 8, 16
gat_dims = 8, 8
sta_channels = 8, 16
heads = 2
embed_dim = 8
epochs = 200
decay_every = 100
"""


def run(*argv):
    code = cli.main([str(a) for a in argv])
    if code:
        raise SystemExit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="overfit_run")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--protocol", default="cc")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "tiny.cfg").write_text(TINY)
    d = out / "data"

    t0 = time.perf_counter()
    run("synth", "--out", d, "--identities", 8, "--tracklets", 4, "--heldout", 4, "--clothing", 2,
        "--noise", 0.5, "--appearance-noise", 0.1, "--seed", args.seed)
    run("preprocess", "--keypoints", d / "keypoints.jsonl", "--manifest", d / "manifest.jsonl",
        "--appearance", d / "appearance.jsonl", "--out", out / "store")
    run("train", "--data", out / "store", "--config", out / "tiny.cfg", "--seed", args.seed, "--out", out / "run")
    run("eval", "--checkpoint", out / "run" / "checkpoint.bin", "--data", out / "store",
        "--protocol", args.protocol, "--out", out / "eval")
    print(json.dumps(json.loads((out / "eval" / "report.json").read_text()), indent=2))
    print(f"total {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
