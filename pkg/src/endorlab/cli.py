"""Batch command-line front end.

Subcommands: levels, spectrum, endor, fit-tensors, fit-relaxation,
fit-decay, simulate-seq, assemble. Every command reads a YAML project
config, writes TSV tables plus a run_report.json into the output
directory, and exits nonzero on error (or on fit non-convergence, with the
report still written). A single --seed flag feeds every stochastic step.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import pulsesim, relaxation, spectra, spincore, tensorfit
from .config import ConfigError, load_config
from .tables import RunReport, read_decay_csv, read_rates_csv, read_roadmap_csv, write_tsv

log = logging.getLogger("endorlab")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 3


def _setup_logging():
    level = os.environ.get("ENDOR_LAB_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _require(cfg, attr, what):
    value = getattr(cfg, attr)
    if value is None:
        raise ConfigError(f"this command requires {what} in the config")
    return value


def _class_systems(cfg):
    """The four subsystems of the paper configuration: two C2 classes of the
    odd isotope plus the two even-isotope (I=0) classes."""
    s1 = cfg.system
    s2 = spectra.c2_partner(s1)
    out = [(1, s1), (2, s2)]
    if s1.nuclear_spin != 0:
        out += [(1, s1.with_nuclear_spin_zero()), (2, s2.with_nuclear_spin_zero())]
    return out


def cmd_levels(cfg, args, report):
    b = _require(cfg, "field", "a field block")
    levels = pulsesim.labeled_levels(cfg.system, b)
    if not levels.labeling_reliable:
        report.warnings.append("level labeling flagged unreliable")
        print("warning: level labeling flagged unreliable", file=sys.stderr)
    rows = [(k, *levels.labels[k], levels.energies_mhz[k]) for k in range(levels.n)]
    out = write_tsv(Path(args.out) / "levels.tsv",
                    ["index", "mS", "mI", "energy_MHz"], rows)
    report.add_output(out)

    lines = spectra.endor_frequencies(cfg.system, b)
    rows = [(ln.manifold_ms, ln.mi_from, ln.mi_to, ln.frequency_MHz, ln.moment)
            for ln in lines]
    out = write_tsv(Path(args.out) / "nmr_lines.tsv",
                    ["manifold_mS", "mI_from", "mI_to", "frequency_MHz", "moment"], rows)
    report.add_output(out)
    return EXIT_OK


def cmd_spectrum(cfg, args, report):
    window = _require(cfg, "window_mT", "a spectrometer scan window")
    b = cfg.field
    orientation = (b.theta_deg, b.phi_deg) if b is not None else (0.0, 0.0)
    threshold = cfg.moment_threshold
    peaks = []
    for class_id, system in _class_systems(cfg):
        kw = {"moment_threshold": threshold} if threshold is not None else {}
        peaks += spectra.resonance_fields(system, orientation, cfg.f_mw_GHz, window,
                                          grid_mT=cfg.scan_grid_mT,
                                          class_id=class_id, **kw)
    peaks.sort(key=lambda p: p.field_mT)
    rows = [(p.class_id, p.transition[0], p.transition[1], p.field_mT, p.moment)
            for p in peaks]
    out = write_tsv(Path(args.out) / "peaks.tsv",
                    ["class_id", "i", "j", "field_mT", "moment"], rows)
    report.add_output(out)
    if not peaks:
        report.warnings.append("no resonances in the scan window")
        print("warning: no resonances in the scan window", file=sys.stderr)
        return EXIT_OK

    grid = np.linspace(window[0], window[1], 4001)
    _, trace = spectra.stick_to_lineshape(peaks, cfg.linewidth_mT, "gaussian", grid)
    out = write_tsv(Path(args.out) / "spectrum.tsv", ["field_mT", "amplitude"],
                    zip(grid, trace))
    report.add_output(out)
    return EXIT_OK


def cmd_endor(cfg, args, report):
    b = _require(cfg, "field", "a field block")
    rows = []
    for class_id, system in _class_systems(cfg):
        if system.nuclear_spin == 0:
            continue
        for ln in spectra.endor_frequencies(system, b):
            if not ln.reliable:
                report.warnings.append(f"class {class_id}: labeling unreliable")
            rows.append((class_id, ln.manifold_ms, ln.mi_from, ln.mi_to,
                         ln.frequency_MHz, ln.moment))
    rows.sort(key=lambda r: (r[0], r[4]))
    out = write_tsv(Path(args.out) / "endor_lines.tsv",
                    ["class_id", "manifold_mS", "mI_from", "mI_to", "frequency_MHz", "moment"],
                    rows)
    report.add_output(out)
    return EXIT_OK


def cmd_fit_tensors(cfg, args, report):
    window = _require(cfg, "window_mT", "a spectrometer scan window")
    data_path = args.data or cfg.data_paths.get("roadmap_csv")
    if data_path is None:
        raise ConfigError("fit-tensors needs --data roadmap.csv (or data.roadmap_csv)")
    report.digest_file(data_path)
    roadmap = read_roadmap_csv(data_path, cfg.f_mw_GHz, window,
                               nuclear_spin=cfg.system.nuclear_spin)
    result = tensorfit.fit(roadmap, seed=args.seed, threads=args.threads)

    g = result.g_tensor
    a = result.a_tensor_mhz
    pg = spincore.principal_from_tensor(g)
    pa = spincore.principal_from_tensor(a)
    lines = [
        "# tensor fit report",
        f"converged: {result.converged}",
        f"objective_mT2: {result.objective_mT2:.6g}",
        f"residual_gauss: {result.residual_gauss:.4f}",
        f"n_points: {result.n_points}",
        f"n_unmatched: {result.n_unmatched}",
        f"iterations: {result.iterations}",
        f"n_starts: {result.n_starts}",
        f"failed_record_fraction: {result.failed_record_fraction:.4f}",
        "g_matrix_row_major: " + " ".join(f"{v:.6g}" for v in g.ravel()),
        "g_principal: " + " ".join(f"{v:.6g}" for v in pg.values),
        "g_euler_zyz_deg: " + " ".join(f"{v:.4f}" for v in pg.euler_zyz_deg),
        "a_matrix_mhz_row_major: " + " ".join(f"{v:.6g}" for v in a.ravel()),
        "a_principal_mhz: " + " ".join(f"{v:.6g}" for v in pa.values),
        "a_euler_zyz_deg: " + " ".join(f"{v:.4f}" for v in pa.euler_zyz_deg),
    ]
    out = Path(args.out) / "fit_report.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    report.add_output(out)

    rows = []
    for rec in tensorfit.residual_report(result, roadmap):
        for k, dev in enumerate(rec["deviation_gauss"]):
            rows.append((rec["plane"], rec["angle_deg"], k,
                         rec["fields_exp_mT"][k], rec["fields_sim_mT"][k], dev))
    out = write_tsv(Path(args.out) / "fit_residuals.tsv",
                    ["plane", "angle_deg", "peak_index", "field_exp_mT",
                     "field_sim_mT", "deviation_gauss"], rows)
    report.add_output(out)
    if not result.converged:
        report.warnings.append("tensor fit did not converge")
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_fit_relaxation(cfg, args, report):
    data_path = args.data or cfg.data_paths.get("rates_csv")
    if data_path is None:
        raise ConfigError("fit-relaxation needs --data rates.csv (or data.rates_csv)")
    report.digest_file(data_path)
    datasets = read_rates_csv(data_path)
    t_grid = np.geomspace(0.05, 6.5, 400)
    code = EXIT_OK

    t1e_fit = None
    if "t1e" in datasets:
        temps, rates = datasets["t1e"]
        t1e_fit = relaxation.fit_rate_model(temps, rates, "t1e",
                                            fixed={"f_r_GHz": cfg.f_mw_GHz})
        terms = relaxation.t1e_terms(t_grid, t1e_fit.params)
        total = relaxation.t1e_rate(t_grid, t1e_fit.params)
        out = write_tsv(Path(args.out) / "t1e_model.tsv",
                        ["temperature_K", "rate_per_s", "direct", "raman", "orbach"],
                        zip(t_grid, total, terms["direct"], terms["raman"], terms["orbach"]))
        report.add_output(out)
        if not t1e_fit.converged:
            report.warnings.append("t1e fit did not converge")
            code = EXIT_NOT_CONVERGED

    if "t1n" in datasets:
        if t1e_fit is None:
            raise ConfigError("t1n fitting requires t1e data in the same file")
        temps, rates = datasets["t1n"]
        t1n_fit = relaxation.fit_rate_model(
            temps, rates, "t1n",
            fixed={"f_r_GHz": cfg.f_mw_GHz},
            t1e_of_T=lambda t: relaxation.t1e_rate(t, t1e_fit.params))
        total, terms = relaxation.t1n_rate(
            t_grid, t1n_fit.params, relaxation.t1e_rate(t_grid, t1e_fit.params))
        out = write_tsv(Path(args.out) / "t1n_model.tsv",
                        ["temperature_K", "rate_per_s", "electron_driven", "direct",
                         "raman", "orbach"],
                        zip(t_grid, total, terms["electron_driven"], terms["direct"],
                            terms["raman"], terms["orbach"]))
        report.add_output(out)
        if not t1n_fit.converged:
            report.warnings.append("t1n fit did not converge")
            code = EXIT_NOT_CONVERGED

    lines = ["# relaxation fit report"]
    if t1e_fit is not None:
        p = t1e_fit.params
        lines += [f"t1e.converged: {t1e_fit.converged}",
                  f"t1e.a_d_per_s: {p.a_d:.6g}", f"t1e.a_r_per_s_K9: {p.a_r:.6g}",
                  f"t1e.a_o_per_s: {p.a_o:.6g}", f"t1e.delta_o_K: {p.delta_o_K:.6g}"]
    if "t1n" in datasets:
        p = t1n_fit.params
        lines += [f"t1n.converged: {t1n_fit.converged}",
                  f"t1n.sigma: {p.sigma:.6g}", f"t1n.gamma_d_per_s: {p.gamma_d:.6g}",
                  f"t1n.gamma_r_per_s_K9: {p.gamma_r:.6g}",
                  f"t1n.gamma_o_per_s_Hz3: {p.gamma_o:.6g}"]
    out = Path(args.out) / "relaxation_report.txt"
    out.write_text("\n".join(lines) + "\n")
    report.add_output(out)
    return code


def cmd_fit_decay(cfg, args, report):
    data_path = args.data or cfg.data_paths.get("decay_csv")
    if data_path is None:
        raise ConfigError("fit-decay needs --data decay.csv (or data.decay_csv)")
    report.digest_file(data_path)
    curve = read_decay_csv(data_path)
    mims = relaxation.mims_fit(curve)
    single = relaxation.fit_exponential(curve, kind="single")

    lines = [
        "# echo decay fit report",
        f"mims.e0: {mims.e0:.6g} +- {mims.e0_err:.3g}",
        f"mims.t2_s: {mims.t2_s:.6g} +- {mims.t2_err:.3g}",
        f"mims.stretch_m: {mims.m:.6g} +- {mims.m_err:.3g}",
        f"single_exp.tau_s: {single.tau_s:.6g}",
        f"single_exp.reduced_chi2: {single.reduced_chi2:.4g}",
    ]
    out = Path(args.out) / "decay_report.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    report.add_output(out)

    tt = np.geomspace(curve.two_tau_s[0], curve.two_tau_s[-1], 400)
    model = mims.e0 * np.exp(-((tt / mims.t2_s) ** mims.m))
    out = write_tsv(Path(args.out) / "decay_model.tsv",
                    ["two_tau_s", "amplitude"], zip(tt, model))
    report.add_output(out)
    return EXIT_OK


def _parse_sequence_file(path, cfg):
    with open(path) as fh:
        spec = yaml.safe_load(fh)
    env = spec.get("environment") or {}
    temperature = float(env.get("temperature_K", cfg.temperature_K or 0.0))
    if temperature <= 0:
        raise ConfigError("sequence needs environment.temperature_K (or config environment)")
    elements = []
    for el in spec.get("elements", []):
        kind = el.get("type")
        if kind == "pulse":
            levels = tuple(el["levels"]) if "levels" in el else None
            elements.append(pulsesim.PulseOp(
                channel=el.get("channel", "RF"),
                levels=levels,
                freq_MHz=el.get("freq_MHz"),
                angle_rad=np.radians(float(el.get("angle_deg", 180.0))),
                efficiency=float(el.get("efficiency", 1.0))))
        elif kind == "wait":
            elements.append(pulsesim.Wait(duration_s=float(el["duration_s"])))
        elif kind == "readout":
            levels = tuple(el["levels"]) if "levels" in el else None
            elements.append(pulsesim.Readout(levels=levels, freq_MHz=el.get("freq_MHz")))
        else:
            raise ConfigError(f"unknown sequence element type {kind!r}")
    seq = pulsesim.Sequence(elements=elements, temperature_K=temperature,
                            t1e_s=env.get("t1e_s", cfg.t1e_s),
                            t1n_s=env.get("t1n_s", cfg.t1n_s))
    sweep = spec.get("sweep")
    return seq, sweep


def cmd_simulate_seq(cfg, args, report):
    b = _require(cfg, "field", "a field block")
    if args.data is None:
        raise ConfigError("simulate-seq needs --data sequence.yaml")
    report.digest_file(args.data)
    seq, sweep = _parse_sequence_file(args.data, cfg)

    rows = []
    if sweep is None:
        echo, _ = pulsesim.run_sequence(cfg.system, b, seq)
        rows.append((0.0, echo))
    else:
        idx = int(sweep["element_index"])
        field_name = sweep["field"]
        values = sweep.get("values")
        if values is None:
            values = np.linspace(float(sweep["start"]), float(sweep["stop"]),
                                 int(sweep["n"]))
        for v in values:
            el = seq.elements[idx]
            setattr(el, field_name, float(v))
            echo, _ = pulsesim.run_sequence(cfg.system, b, seq)
            rows.append((float(v), echo))
    out = write_tsv(Path(args.out) / "sweep.tsv", ["sweep_value", "echo_amplitude"], rows)
    report.add_output(out)
    return EXIT_OK


def cmd_assemble(cfg, args, report):
    if args.data is None:
        raise ConfigError("assemble needs --data steps.yaml")
    report.digest_file(args.data)
    with open(args.data) as fh:
        spec = yaml.safe_load(fh)
    steps = [(float(s[0]), float(s[1]), float(s[2]), int(s[3])) for s in spec["steps"]]
    diagram = pulsesim.assemble_level_diagram(
        anchor_freq_GHz=float(spec["anchor_freq_GHz"]),
        anchor_mi=float(spec["anchor_mi"]),
        steps=steps,
        nuclear_spin=float(spec.get("nuclear_spin", cfg.system.nuclear_spin)))
    rows = [(ms, mi, "" if e is None else e)
            for (ms, mi), e in sorted(diagram.energies_mhz.items())]
    out = write_tsv(Path(args.out) / "level_diagram.tsv",
                    ["mS", "mI", "energy_MHz"], rows)
    report.add_output(out)
    if not diagram.complete:
        report.warnings.append(
            f"diagram incomplete; missing steps at {diagram.missing_steps}")
        print(f"warning: diagram incomplete, missing {diagram.missing_steps}",
              file=sys.stderr)
    return EXIT_OK


_COMMANDS = {
    "levels": cmd_levels,
    "spectrum": cmd_spectrum,
    "endor": cmd_endor,
    "fit-tensors": cmd_fit_tensors,
    "fit-relaxation": cmd_fit_relaxation,
    "fit-decay": cmd_fit_decay,
    "simulate-seq": cmd_simulate_seq,
    "assemble": cmd_assemble,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="endor-lab",
        description="Coupled electron-nuclear spin simulation and fitting toolkit")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="YAML project config")
    parser.add_argument("--data", default=None, help="input data file (CSV/YAML)")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, default=0, help="seed for stochastic steps")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker processes for parallel stages")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    report = RunReport(command=args.command)
    try:
        cfg = load_config(args.config)
        report.digest_file(args.config)
        code = _COMMANDS[args.command](cfg, args, report)
    except (ConfigError, ValueError, LookupError, OSError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        report.warnings.append(str(exc))
        report.success = False
        try:
            report.finish(args.out)
        except OSError:
            pass
        return EXIT_ERROR
    report.success = code == EXIT_OK
    report.finish(args.out)
    return code


if __name__ == "__main__":
    sys.exit(main())
