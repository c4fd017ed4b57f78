"""Relative steering efficiency against displacement, with the analytic range.

    python scripts/steering_efficiency.py [--eta 0.05] [--points 11] [--plot out.png]
"""

import argparse

import numpy as np

from photonic_engine.steering import SteeringGeometry, SteeringSimulator, steering_range


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--eta", type=float, default=0.05)
    ap.add_argument("--points", type=int, default=11)
    ap.add_argument("--plot", default=None)
    args = ap.parse_args()
    g = SteeringGeometry(eta_o=args.eta)
    reach = steering_range(g)
    r = np.linspace(0.0, min(1.2, reach), args.points)
    eff = SteeringSimulator(geom=g).relative_efficiency(np.column_stack([r * g.gamma, np.zeros_like(r)]))
    # single-pixel blaze envelope, the analytic expectation for a pixelated grating
    dx = 8e-6
    blaze_angle = r * g.gamma / g.delta_f_o
    sinc2 = np.sinc(blaze_angle * dx / g.wavelength) ** 2
    print(f"R_max = {reach:.4f} pitches (R/eta_o = {reach / args.eta:.2f})")
    print(f"{'R':>6} {'simulated':>10} {'sinc^2':>8}")
    for a, b, c in zip(r, eff, sinc2):
        print(f"{a:6.3f} {b:10.4f} {c:8.4f}")
    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(r, eff, "o-", label="simulated")
        ax.plot(r, sinc2, "--", label="pixel envelope")
        ax.set_xlabel("displacement / pitch")
        ax.set_ylabel("relative efficiency")
        ax.legend()
        fig.tight_layout()
        fig.savefig(args.plot, dpi=120)


if __name__ == "__main__":
    main()
