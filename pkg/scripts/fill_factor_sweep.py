"""Simulated vs designed output spot diameter across fill factors.

Prints one row per eta_o: the design defocus, the diameter measured after
propagation through the synthesized microlens mask (clipped by the square
pitch aperture) and the diameter of an unclipped finely sampled lens.

    python scripts/fill_factor_sweep.py [--etas 0.05 0.2 0.707]
"""

import argparse

import numpy as np

from photonic_engine.steering import MicrolensArray, SteeringGeometry, SteeringSimulator, lens_focal


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--etas", type=float, nargs="+", default=[0.05, 0.1, 0.2, 0.4, 1 / np.sqrt(2)])
    ap.add_argument("--unclipped", action="store_true", help="also run the fine-pixel unclipped reference (slow)")
    args = ap.parse_args()
    print(f"{'eta_o':>7} {'delta_f_o[mm]':>14} {'clipped/design':>15} {'unclipped/design':>17}")
    for eta in args.etas:
        g = SteeringGeometry(eta_o=eta)
        design = g.gamma * eta
        sim = SteeringSimulator(geom=g, zero_order=0.0, defocus_error=0.0)
        clipped = sim.spot_diameter(MicrolensArray.grid(g), 5, distance=g.delta_f_o) / design
        free = float("nan")
        if args.unclipped:
            fine = SteeringSimulator(
                geom=g, zero_order=0.0, defocus_error=0.0, slm_pitch=2e-6, upsample=1, window=1536, slm_shape=(2048, 2048)
            )
            lens = MicrolensArray(np.zeros((1, 2)), lens_focal(g), np.zeros((1, 2)), 3 * g.gamma)
            free = fine.spot_diameter(lens, 0) / design
        print(f"{eta:7.3f} {g.delta_f_o * 1e3:14.3f} {clipped:15.3f} {free:17.4f}")


if __name__ == "__main__":
    main()
