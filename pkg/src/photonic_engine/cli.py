"""Scenario runner: ``photonic-engine <scenario> [--seed N] [--config FILE] [--out DIR] [--strict] [--plots]``.

Each scenario writes CSV artifacts and a ``manifest.json`` (seed, config
hash, package versions, criteria) into its output directory. With
``--strict`` a violated criterion exits with status 3; configuration
problems exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import SCENARIOS, ScenarioConfig, load_config
from .device import ChannelBank, DriftModel
from .errors import ConfigError, PhotonicEngineError

log = logging.getLogger("photonic_engine")

EXIT_OK, EXIT_CONFIG, EXIT_CRITERION = 0, 2, 3


@dataclass
class Criterion:
    name: str
    value: float
    limit: float
    passed: bool

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.value:.6g} (limit {self.limit:.6g})"


@dataclass
class ScenarioResult:
    name: str
    criteria: list = field(default_factory=list)
    files: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.criteria)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.8g}" if isinstance(v, (float, np.floating)) else v for v in r])


def _plot(path, draw):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping %s", path.name)
        return None
    fig, ax = plt.subplots(figsize=(5, 3.5))
    draw(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _bank(cfg: ScenarioConfig, seed, v0_spread=0.0):
    c, d = cfg.channels, cfg.drift
    return ChannelBank.default(
        n_channels=c.n_channels,
        seed=seed,
        v_pi=c.v_pi,
        extinction_ratio=c.extinction_ratio,
        insertion_loss=c.insertion_loss,
        bandwidth_3db=c.bandwidth_3db,
        v0_spread=v0_spread,
        drift=DriftModel(tau=d.tau, tau_lp=d.tau_lp, kappa=d.kappa, sigma=d.sigma),
    )


# scenarios ----------------------------------------------------------------------------------------


def run_fanout(cfg: ScenarioConfig, out: Path, plots=False) -> ScenarioResult:
    from .holography import FanoutSimulator, SpotSet, run_wgs, write_uniformity_csv

    f = cfg.fanout
    sim = FanoutSimulator.build(
        n_channels=cfg.channels.n_channels,
        seed=cfg.seed,
        slm_size=f.slm_size,
        source_waist=f.source_waist,
        il_spread_db=f.il_spread_db,
        spacing=f.spacing,
        noise_on=f.noise_on,
    )
    result = run_wgs(sim, SpotSet.from_k(sim.k_true), f.iterations, f.gs_iterations, f.exponent)
    res = ScenarioResult("fanout")
    write_uniformity_csv(out / "uniformity_trajectory.csv", result.reports)
    final = result.measurements[-1]
    _write_csv(
        out / "channel_powers.csv",
        ["channel", "measured", "weight"],
        [(c, float(final[c]), float(w)) for c, w in zip(result.targets.labels, result.targets.weight)],
    )
    res.files += ["uniformity_trajectory.csv", "channel_powers.csv"]
    last = result.reports[-1]
    t = cfg.thresholds
    res.criteria += [
        Criterion("fanout.sigma_pkpk", last.sigma_pkpk, t.sigma_pkpk, last.sigma_pkpk <= t.sigma_pkpk),
        Criterion("fanout.sigma_std", last.sigma_std, t.sigma_std, last.sigma_std <= t.sigma_std),
    ]
    if plots:

        def draw(ax):
            it = [r.iteration for r in result.reports]
            ax.semilogy(it, [r.sigma_pkpk for r in result.reports], "o-", label="pk-pk")
            ax.semilogy(it, [r.sigma_std for r in result.reports], "s-", label="std")
            ax.set_xlabel("WGS iteration")
            ax.set_ylabel("relative error")
            ax.legend()

        if _plot(out / "uniformity.png", draw):
            res.files.append("uniformity.png")
    return res


def run_calibrate(cfg: ScenarioConfig, out: Path, plots=False) -> ScenarioResult:
    from .holography import AffineMap, FanoutSimulator, SpotSet, correct_kvectors

    f, k = cfg.fanout, cfg.calibrate
    rng = np.random.default_rng(cfg.seed + 101)
    sim = FanoutSimulator.build(
        n_channels=cfg.channels.n_channels,
        seed=cfg.seed,
        slm_size=f.slm_size,
        source_waist=f.source_waist,
        il_spread_db=f.il_spread_db,
        spacing=f.spacing,
    )
    res = ScenarioResult("calibrate")

    true_map = AffineMap.from_params((1.1e-6, 0.95e-6), rotation=0.02, offset=(3e-6, -2e-6), shear=0.01)
    fitted, rms = sim.calibrate_imaging(true_map, k.imaging_grid, position_noise=0.1e-6, rng=rng)
    (out / "imaging_fit.json").write_text(
        json.dumps({"linear": fitted.linear.tolist(), "offset": fitted.offset.tolist(), "rms_m": rms}, indent=1)
    )

    amp = sim.measure_source_amplitude(k.superpixel, probe_noise=1e-3, rng=rng)
    s = k.superpixel
    ny, nx = sim.slm_shape
    truth = sim.source.reshape(ny // s, s, nx // s, s).mean(axis=(1, 3))
    np.savetxt(out / "source_amplitude.csv", amp, delimiter=",", fmt="%.6g")

    n = len(sim.k_true)
    ang = rng.uniform(0, 2 * np.pi, n)
    mag = k.k_offset * sim.acceptance_k * np.sqrt(rng.uniform(0, 1, n))
    start = sim.k_true + np.column_stack([mag * np.cos(ang), mag * np.sin(ang)])
    targets, phase, history = correct_kvectors(sim, SpotSet.from_k(start), max_iterations=k.max_iterations)
    rows = [
        (i, c, float(s_[0] / sim.acceptance_k), float(s_[1] / sim.acceptance_k))
        for i, shifts in enumerate(history, start=1)
        for c, s_ in enumerate(shifts)
    ]
    _write_csv(out / "kvector_history.csv", ["iteration", "channel", "shift_kx", "shift_ky"], rows)
    _, gain = sim.coupling_peaks(phase)
    noise = sim.relative_power_noise(phase)
    _write_csv(
        out / "coupling_residual.csv",
        ["channel", "available_gain", "power_noise"],
        [(c, float(g), float(n)) for c, (g, n) in enumerate(zip(gain, noise))],
    )
    res.files += ["imaging_fit.json", "source_amplitude.csv", "kvector_history.csv", "coupling_residual.csv"]
    worst = float(np.max(gain / noise))
    amp_err = float(np.max(np.abs(amp / amp.max() - truth / truth.max())))
    res.criteria += [
        Criterion("calibrate.kvector_iterations", len(history), k.max_iterations, len(history) <= k.max_iterations),
        Criterion("calibrate.gain_over_noise", worst, 1.0, worst < 1.0),
        Criterion("calibrate.imaging_rms_m", rms, 0.5e-6, rms < 0.5e-6),
        Criterion("calibrate.source_amplitude_error", amp_err, 0.02, amp_err < 0.02),
    ]
    return res


def run_lock(cfg: ScenarioConfig, out: Path, plots=False) -> ScenarioResult:
    from .lock import pooled_session_study, write_pulse_report_csv

    lk, t = cfg.lock, cfg.thresholds
    kw = dict(
        sessions=lk.sessions,
        spacing=lk.spacing,
        settle=lk.settle,
        seed=cfg.seed,
        threshold=lk.threshold,
        input_power=lk.input_power,
    )
    locked, rows, lock = pooled_session_study(_bank(cfg, cfg.seed, lk.v0_spread), True, **kw)
    res = ScenarioResult("lock")
    write_pulse_report_csv(out / "pulse_report.csv", rows)
    res.files.append("pulse_report.csv")
    dev = max(r.max_abs_deviation for r in locked.values())
    res.criteria.append(Criterion("lock.max_deviation", dev, t.pulse_deviation, dev < t.pulse_deviation))
    if lk.control_arm:
        free, free_rows, _ = pooled_session_study(
            _bank(cfg, cfg.seed, lk.v0_spread), False, initial_error=lk.initial_error, **kw
        )
        write_pulse_report_csv(out / "control_report.csv", free_rows)
        res.files.append("control_report.csv")
        dev_free = max(r.max_abs_deviation for r in free.values())
        res.criteria.append(Criterion("lock.control_exceeds", dev_free, t.pulse_deviation, dev_free > t.pulse_deviation))
    _write_csv(
        out / "zero_points.csv",
        ["channel", "v0", "v_est"],
        [(c, float(lock.bank.v0[c]), float(lock.state.v_lo_est[c])) for c in range(lock.bank.n_channels)],
    )
    res.files.append("zero_points.csv")
    if plots:

        def draw(ax):
            d = np.array([r[4] for r in rows])
            ax.plot(100 * d, ".", ms=2, label="locked")
            if lk.control_arm:
                ax.plot(100 * np.array([r[4] for r in free_rows]), ".", ms=2, label="unlocked")
            ax.set_xlabel("pulse")
            ax.set_ylabel("deviation (%)")
            ax.legend()

        if _plot(out / "pulse_deviation.png", draw):
            res.files.append("pulse_deviation.png")
    return res


_GEOM_INPUTS = ("gamma", "eta_i", "wavelength", "theta_max_diff", "theta_na", "magnification")


def run_steer(cfg: ScenarioConfig, out: Path, plots=False) -> ScenarioResult:
    from .steering import (
        LATTICES,
        MicrolensArray,
        SteeringGeometry,
        SteeringSimulator,
        steer_to_pattern,
        steering_range,
        write_residuals_csv,
    )

    s, t = cfg.steer, cfg.thresholds
    geom = cfg.geometry()
    sim = SteeringSimulator(geom=geom, zero_order=s.zero_order, defocus_error=s.defocus_error)
    arr = MicrolensArray.grid(geom)
    res = ScenarioResult("steer")
    targets = LATTICES[s.pattern](len(arr), geom.gamma)
    _write_csv(out / "targets.csv", ["label", "x_um", "y_um"], [(i, p[0] * 1e6, p[1] * 1e6) for i, p in enumerate(targets)])
    final, mapping, history = steer_to_pattern(sim, arr, targets, max_iters=s.max_iters, tolerance_px=s.tolerance_px)
    write_residuals_csv(out / "residuals.csv", history)
    _write_csv(
        out / "blazes.csv",
        ["channel", "target", "blaze_x", "blaze_y"],
        [(c, mapping.get(c, -1), float(b[0]), float(b[1])) for c, b in enumerate(final.blaze)],
    )

    reach = steering_range(geom)
    r = np.linspace(0.0, min(1.0, reach), s.sweep_points)
    eff = sim.relative_efficiency(np.column_stack([r * geom.gamma, np.zeros_like(r)]))
    _write_csv(out / "efficiency.csv", ["displacement_pitch", "relative_efficiency"], list(zip(r.tolist(), eff.tolist())))

    rows = []
    for eta in (0.05, 0.2, 1 / np.sqrt(2)):
        g = SteeringGeometry(**{k: getattr(geom, k) for k in _GEOM_INPUTS}, eta_o=eta)
        d = SteeringSimulator(geom=g, zero_order=0.0, defocus_error=0.0).spot_diameter(
            MicrolensArray.grid(g), 5, distance=g.delta_f_o
        )
        rows.append((eta, g.delta_f_o, d, g.gamma * eta, steering_range(g)))
    _write_csv(out / "fill_factor.csv", ["eta_o", "delta_f_o", "diameter_simulated", "diameter_model", "steering_range"], rows)
    res.files += ["targets.csv", "residuals.csv", "blazes.csv", "efficiency.csv", "fill_factor.csv"]

    worst = float(history[-1].max())
    res.criteria += [
        Criterion("steer.residual_px", worst, t.residual_px, worst < t.residual_px),
        Criterion("steer.iterations", len(history), s.max_iters, len(history) <= s.max_iters),
    ]
    if plots:

        def draw(ax):
            ax.plot(r, eff, "o-")
            ax.set_xlabel("displacement / pitch")
            ax.set_ylabel("relative efficiency")

        if _plot(out / "efficiency.png", draw):
            res.files.append("efficiency.png")
    return res


def run_address(cfg: ScenarioConfig, out: Path, plots=False) -> ScenarioResult:
    from .emitterlab import (
        F0,
        AddressingPlan,
        addressing_sequence,
        align_channels,
        demo_lab,
        spatial_addressing_run,
        spectral_ple,
        write_spectrum_csv,
        write_trace_csv,
    )
    from .lock import ZeroPointLock

    a, t = cfg.address, cfg.thresholds
    n = cfg.channels.n_channels
    if n != 16:
        raise ConfigError(["channels.n_channels: the addressing demo uses a 4 x 4 array (16 channels)"])
    lab, pref = demo_lab(cfg.seed, count=a.count)
    plan, report = align_channels(AddressingPlan.unsteered(n), lab, preferred=pref)
    res = ScenarioResult("address")
    _write_csv(
        out / "alignment.csv",
        ["channel", "emitter", "offset_x_um", "offset_y_um", "focus_um", "signal"],
        [
            (c, int(plan.emitter[c]), plan.offsets[c, 0] * 1e6, plan.offsets[c, 1] * 1e6, plan.focus[c] * 1e6, float(report.signal[c]))
            for c in range(n)
        ],
    )
    pair_channel = next(iter(pref))
    spectrum = spectral_ple(
        lab, plan, pair_channel, F0 + a.laser_detuning, a.shift_start, a.shift_stop, a.shift_step, seed=cfg.seed
    ).binned(a.bin_factor)
    write_spectrum_csv(out / "ple_spectrum.csv", spectrum)
    peaks = np.sort(spectrum.peaks())
    expected_peaks = np.sort(-a.laser_detuning + np.array([0.0, -520e6]))
    if len(peaks) == len(expected_peaks):
        peak_err = float(np.max(np.abs(peaks - expected_peaks)))
    else:
        peak_err = float("inf")

    bank = _bank(cfg, cfg.seed + 7, cfg.lock.v0_spread)
    bank.enabled[list(a.disabled)] = False
    lock = ZeroPointLock.build(bank, camera_seed=cfg.seed, input_power=cfg.lock.input_power)
    lock.run(a.settle)
    seq, bins, _ = addressing_sequence(bank.v_pi, n)
    result = spatial_addressing_run(lab, plan, lock, seq, bins, repetitions=a.repetitions, seed=cfg.seed)
    write_trace_csv(out / "addressing_trace.csv", result)
    _write_csv(out / "skipped_channels.csv", ["channel"], [(c,) for c in result.skipped])
    res.files += ["alignment.csv", "ple_spectrum.csv", "addressing_trace.csv", "skipped_channels.csv"]

    s1, s2, _ = result.sections(n)
    disabled = set(a.disabled)
    rel = [
        abs(s2[k] - s1[k] - s1[(k + 1) % n]) / abs(s2[k])
        for k in range(n)
        if not (k in disabled and (k + 1) % n in disabled)
    ]
    z = (result.counts - result.expected) / np.sqrt(np.maximum(result.expected, 1.0))
    chi2 = float(np.mean(z**2))
    res.criteria += [
        Criterion("address.peak_error_hz", peak_err, t.peak_tolerance, peak_err <= t.peak_tolerance),
        Criterion("address.pair_sum_error", float(max(rel)), t.pair_tolerance, max(rel) <= t.pair_tolerance),
        Criterion("address.trace_reduced_chi2", chi2, 2.0, chi2 < 2.0),
    ]
    if plots:

        def draw(ax):
            ax.errorbar(spectrum.shift / 1e9, spectrum.counts, spectrum.sigma, fmt=".")
            ax.set_xlabel("frequency shift (GHz)")
            ax.set_ylabel("counts")

        if _plot(out / "ple_spectrum.png", draw):
            res.files.append("ple_spectrum.png")
    return res


RUNNERS = {
    "fanout": run_fanout,
    "calibrate": run_calibrate,
    "lock": run_lock,
    "steer": run_steer,
    "address": run_address,
}


def write_manifest(out: Path, cfg: ScenarioConfig, results):
    manifest = {
        "seed": cfg.seed,
        "config_sha256": cfg.digest(),
        "config": cfg.normalized(),
        "versions": {"photonic_engine": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        "scenarios": {
            r.name: {"files": r.files, "criteria": [c.__dict__ | {"passed": bool(c.passed)} for c in r.criteria]}
            for r in results
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, default=float))


def run_scenario(name, cfg: ScenarioConfig, out: Path, plots=False):
    """Run one scenario (or all of them) into ``out``; returns the list of results."""
    out = Path(out)
    names = [s for s in SCENARIOS if s != "all"] if name == "all" else [name]
    results = []
    for n in names:
        target = out / n if name == "all" else out
        target.mkdir(parents=True, exist_ok=True)
        log.info("running %s", n)
        results.append(RUNNERS[n](cfg, target, plots))
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg, results)
    return results


def build_parser():
    p = argparse.ArgumentParser(prog="photonic-engine", description=__doc__.splitlines()[0])
    p.add_argument("scenario", choices=SCENARIOS)
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--config", type=Path, default=None, help="YAML scenario configuration")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--strict", action="store_true", help="exit 3 when any criterion fails")
    p.add_argument("--plots", action="store_true", help="also write PNG figures (needs matplotlib)")
    p.add_argument("--pattern", choices=("square", "hex", "hexagonal", "tri", "triangular"), default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.pattern is not None:
            cfg.steer.pattern = {"hex": "hexagonal", "tri": "triangular"}.get(args.pattern, args.pattern)
        results = run_scenario(args.scenario, cfg, args.out, args.plots)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PhotonicEngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    failed = False
    for r in results:
        for c in r.criteria:
            print(c.line())
            if not c.passed:
                failed = True
                print(f"criterion violated: {c.name}", file=sys.stderr)
    return EXIT_CRITERION if failed and args.strict else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
