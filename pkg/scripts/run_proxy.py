"""Run the desk-scale proxy experiment and print the acceptance checks."""

import argparse
import logging
import sys
from dataclasses import fields

from glom.proxy import ProxyConfig, run_proxy


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/proxy")
    for f in fields(ProxyConfig):
        ap.add_argument(f"--{f.name.replace('_', '-')}", type=type(f.default), default=f.default)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = ProxyConfig(**{f.name: getattr(args, f.name) for f in fields(ProxyConfig)})

    def progress(stage, fold, rec):
        if rec.epoch == 1 or rec.epoch % 10 == 0:
            print(f"[{stage} fold {fold}] epoch {rec.epoch} loss {rec.train_loss:.4f} val {rec.val_acc:.3f}", flush=True)

    result = run_proxy(cfg, args.out, progress)
    for name, (ok, value) in result.checks().items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {value}")
    print(f"seconds: {result.seconds}")
    return 0 if all(ok for ok, _ in result.checks().values()) else 1


if __name__ == "__main__":
    sys.exit(main())
