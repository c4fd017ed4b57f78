"""Locked vs free-running pulse-energy deviation as the drift noise grows.

    python scripts/lock_drift_study.py [--sigmas 1e-3 2e-3 5e-3] [--sessions 10]
"""

import argparse

from photonic_engine.device import ChannelBank, DriftModel
from photonic_engine.lock import pooled_session_study


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sigmas", type=float, nargs="+", default=[1e-3, 2e-3, 5e-3, 1e-2])
    ap.add_argument("--sessions", type=int, default=10)
    ap.add_argument("--channels", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print(f"{'sigma[V/rt s]':>14} {'locked':>10} {'unlocked':>10}")
    for sigma in args.sigmas:
        out = []
        for locked in (True, False):
            bank = ChannelBank.default(args.channels, seed=args.seed, v0_spread=0.3, drift=DriftModel(sigma=sigma))
            pooled, _, _ = pooled_session_study(bank, locked, sessions=args.sessions, seed=args.seed)
            out.append(max(r.max_abs_deviation for r in pooled.values()))
        print(f"{sigma:14.1e} {out[0]:10.2e} {out[1]:10.2e}")


if __name__ == "__main__":
    main()
