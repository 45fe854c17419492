"""
Command-line front end: ``dyndisc gen-data | calibrate | predict | upscale | summarize``.

Every command writes tidy CSV/JSON artifacts plus ``run_manifest.json`` (sha256
digests of inputs and outputs). Exit codes: 0 success, 2 configuration or usage
error, 3 numerical abort. ``DYNDISC_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from .bss_anova import ComponentSpec, DiscrepancyModel, build_kl_basis
from .calibration import Chain, McmcAbort, McmcConfig, PriorSpec, posterior_predictive, run_mcmc
from .data_io import gen_profiles, gen_synthetic, read_dataset, write_dataset
from .dynamics import PhysicalConstants, RealityParams, SolverConfig, SolverFailure
from .upscale import ReactorConfig, propagate, reality_reactor

log = logging.getLogger("dyndisc")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


def default_config(name: str) -> Path:
    """Path of a packaged default config (``truth``, ``prior``, ``mcmc``, ``reactor``, ``discrepancy``)."""
    return Path(str(resources.files("dyndisc") / "configs" / f"{name}.json"))


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict) or cfg.get("schema_version") != 1:
        raise ConfigError(f"{path}: expected a JSON object with schema_version 1")
    return cfg


def _pkg_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_paths: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    wall_time_s: float = 0.0
    version: str = field(default_factory=_pkg_version)

    def add_inputs(self, *paths):
        for p in paths:
            self.inputs[str(p)] = sha256(p)

    def add_outputs(self, out_dir: Path, *paths):
        for p in paths:
            self.outputs[str(Path(p).relative_to(out_dir))] = sha256(p)

    def write(self, out_dir: Path) -> Path:
        """Write ``run_manifest.json`` atomically (temp file + rename)."""
        target = out_dir / "run_manifest.json"
        fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".manifest.", suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, target)
        return target


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def constants_from(d: dict | None) -> PhysicalConstants:
    return PhysicalConstants(**(d or {}))


def build_layout(cfg: dict) -> DiscrepancyModel:
    basis = build_kl_basis(int(cfg.get("grid_size", 512)), int(cfg.get("n_basis", 25)))
    specs = [ComponentSpec.from_dict(c) for c in cfg["components"]]
    return DiscrepancyModel.zeros(basis, specs, input_ranges=cfg.get("input_ranges"))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg_path = args.config or default_config("truth")
    cfg = load_config(cfg_path)
    try:
        reality = RealityParams(**cfg["reality"])
        consts = constants_from(cfg.get("constants"))
        profiles = gen_profiles(cfg.get("profiles"))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{cfg_path}: {exc}") from None
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    noise = float(cfg.get("noise_sd", 1e-4))
    solver = SolverConfig(substeps=int(cfg.get("reality_substeps", 256)))
    with_z = bool(cfg.get("weight_includes_z", False))
    series = gen_synthetic(reality, profiles, noise, seed, consts, solver, with_z)
    out = Path(args.out)
    man_path = write_dataset(out, series, reality, seed, noise,
                             extra={"constants": asdict(consts), "weight_includes_z": with_z})
    manifest = RunManifest("gen-data", {"truth": str(cfg_path)}, seed)
    manifest.add_inputs(cfg_path)
    manifest.add_outputs(out, man_path, *sorted(out.glob("series_*.csv")))
    return _finish(manifest, out)


def cmd_calibrate(args) -> int:
    prior_path = args.prior or default_config("prior")
    mcmc_path = args.config or default_config("mcmc")
    layout_path = args.layout or default_config("discrepancy")
    prior = PriorSpec.from_dict(load_config(prior_path))
    mcmc_d = load_config(mcmc_path)
    if args.n_iter is not None:
        mcmc_d["n_iter"] = args.n_iter
        mcmc_d["n_burn"] = args.n_burn if args.n_burn is not None else args.n_iter // 2
    elif args.n_burn is not None:
        mcmc_d["n_burn"] = args.n_burn
    if args.seed is not None:
        mcmc_d["seed"] = args.seed
    mcmc = McmcConfig.from_dict(mcmc_d)
    layout = None if args.no_discrepancy else build_layout(load_config(layout_path))
    data, ds_manifest = read_dataset(args.data)
    consts = constants_from(ds_manifest.get("constants"))

    chain = run_mcmc(data, prior, layout, mcmc, consts, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chain.write(out / "chain.json")
    summary = _write_csv(out / "summary.csv", ["parameter", "mean", "hpd_lo", "hpd_hi"], chain.summary_rows())
    report = _write_json(out / "report.json", {"acceptance": chain.acceptance, "n_failures": chain.n_failures,
                                               "n_records": chain.n_samples})
    manifest = RunManifest("calibrate", {"prior": str(prior_path), "mcmc": str(mcmc_path),
                                         "layout": None if args.no_discrepancy else str(layout_path)}, mcmc.seed)
    manifest.add_inputs(prior_path, mcmc_path, Path(args.data) / "dataset.json")
    outputs = [out / "chain.json", out / "chain.ndjson", summary, report]
    if (out / "chain.basis.json").exists() and layout is not None:
        outputs.append(out / "chain.basis.json")
    manifest.add_outputs(out, *outputs)
    return _finish(manifest, out)


def _chain_path(arg) -> Path:
    p = Path(arg)
    return p / "chain.json" if p.is_dir() else p


def cmd_predict(args) -> int:
    chain_path = _chain_path(args.chain)
    chain = Chain.read(chain_path)
    data, ds_manifest = read_dataset(args.data)
    consts = constants_from(ds_manifest.get("constants"))
    seed = args.seed if args.seed is not None else 0
    bands = posterior_predictive(chain, data, args.n_draws, consts, seed, args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    cover = {}
    for k, b in enumerate(bands):
        header = ["t", "y_obs", "mean", "lo", "hi", "pred_lo", "pred_hi"] + \
                 [f"draw_{i + 1}" for i in range(b.draws.shape[0])]
        rows = np.column_stack([b.t, b.y_obs, b.mean, b.lo, b.hi, b.pred_lo, b.pred_hi, b.draws.T])
        written.append(_write_csv(out / f"predict_{k:02d}.csv", header, rows))
        cover[b.label] = {"coverage": b.coverage(), "n_dropped": b.n_dropped, "clamped": b.clamped}
    written.append(_write_json(out / "coverage.json", cover))
    manifest = RunManifest("predict", {}, seed)
    manifest.add_inputs(chain_path, Path(args.data) / "dataset.json")
    manifest.add_outputs(out, *written)
    return _finish(manifest, out)


def cmd_upscale(args) -> int:
    chain_path = _chain_path(args.chain)
    cfg_path = args.config or default_config("reactor")
    cfg = ReactorConfig.from_dict(load_config(cfg_path))
    chain = Chain.read(chain_path)
    consts = PhysicalConstants()
    truth_cfg = None
    if args.reality:
        truth_path = default_config("truth") if args.reality == "default" else args.reality
        truth_cfg = load_config(truth_path)
        consts = constants_from(truth_cfg.get("constants"))
    seed = args.seed if args.seed is not None else 0
    n = min(args.n_samples, chain.n_samples)
    if n < args.n_samples:
        log.warning("chain has %d samples; propagating %d instead of %d", chain.n_samples, n, args.n_samples)
    res = propagate(chain, n, cfg, consts, seed, args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cap_rows = []
    j = 0
    for i, ok, cl in zip(res.draw_indices, res.ok, res.clamps):
        val = res.capture[j] if ok else float("nan")
        j += int(ok)
        cap_rows.append((int(i), int(ok), val, int(cl)))
    cap = _write_csv(out / "capture.csv", ["draw", "converged", "capture_fraction", "n_clamped"], cap_rows)
    bands = _write_csv(out / "bands.csv", ["z", "t", "T_lo", "T_med", "T_hi", "p_lo", "p_med", "p_hi"],
                       res.band_rows())
    summary = dict(res.summary)
    if truth_cfg is not None:
        rsol = reality_reactor(RealityParams(**truth_cfg["reality"]), cfg, consts,
                               load_includes_z=bool(truth_cfg.get("weight_includes_z", False)))
        summary["reality_capture"] = rsol.capture_fraction if rsol.converged else None
        _write_csv(out / "reality_profile.csv", ["z", "t", "x", "T", "p"],
                   np.column_stack([rsol.z, rsol.t, rsol.x, rsol.T, rsol.p]))
    summ = _write_json(out / "summary.json", summary)
    manifest = RunManifest("upscale", {"reactor": str(cfg_path)}, seed)
    manifest.add_inputs(chain_path, cfg_path)
    outputs = [cap, bands, summ] + ([out / "reality_profile.csv"] if truth_cfg is not None else [])
    manifest.add_outputs(out, *outputs)
    log.info("capture fraction mean %.4f, %d failed draws", summary.get("mean", float("nan")), res.n_failed)
    return _finish(manifest, out)


def cmd_summarize(args) -> int:
    chain_path = _chain_path(args.chain)
    chain = Chain.read(chain_path)
    rows = chain.summary_rows()
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["parameter", "mean", "hpd_lo", "hpd_hi"])
    for r in rows:
        w.writerow([r[0]] + [f"{v:.6g}" for v in r[1:]])
    acc = {k: round(v["accepted"] / v["proposed"], 3) if v["proposed"] else None
           for k, v in chain.acceptance.items()}
    print(f"# samples: {chain.n_samples}, solver failures: {chain.n_failures}", file=sys.stderr)
    print(f"# acceptance: {json.dumps(acc)}", file=sys.stderr)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "summary.csv", ["parameter", "mean", "hpd_lo", "hpd_hi"], rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------


_T0 = [0.0]


def _finish(manifest: RunManifest, out: Path) -> int:
    manifest.wall_time_s = round(time.perf_counter() - _T0[0], 3)
    manifest.write(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="worker threads (results do not depend on it)")
    common.add_argument("--out", required=True, help="output directory")

    p = argparse.ArgumentParser(prog="dyndisc", description=__doc__.strip().splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic reality dataset")
    g.add_argument("--config", help="truth config JSON (default: packaged truth.json)")
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("calibrate", parents=[common], help="run the MCMC calibration")
    c.add_argument("--data", required=True, help="dataset directory (with dataset.json)")
    c.add_argument("--config", help="MCMC config JSON")
    c.add_argument("--prior", help="prior config JSON")
    c.add_argument("--layout", help="discrepancy layout JSON")
    c.add_argument("--no-discrepancy", action="store_true", help="calibrate the parameter-only model")
    c.add_argument("--n-iter", type=int, help="total sweeps (burn-in defaults to half)")
    c.add_argument("--n-burn", type=int, help="burn-in sweeps")
    c.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("predict", parents=[common], help="posterior predictive bands per profile")
    r.add_argument("--chain", required=True, help="chain header JSON or calibrate output directory")
    r.add_argument("--data", required=True)
    r.add_argument("--n-draws", type=int, default=30)
    r.set_defaults(func=cmd_predict)

    u = sub.add_parser("upscale", parents=[common], help="propagate posterior draws through the adsorber")
    u.add_argument("--chain", required=True)
    u.add_argument("--config", help="reactor config JSON")
    u.add_argument("--n-samples", type=int, default=200)
    u.add_argument("--reality", nargs="?", const="default",
                   help="also run the truth kinetics (optionally from this truth config)")
    u.set_defaults(func=cmd_upscale)

    s = sub.add_parser("summarize", help="print the posterior summary table")
    s.add_argument("--chain", required=True)
    s.add_argument("--out", help="also write summary.csv here")
    s.set_defaults(func=cmd_summarize)
    return p


def main(argv=None) -> int:
    _T0[0] = time.perf_counter()
    level = os.environ.get("DYNDISC_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be >= 1")
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, TypeError, FileNotFoundError) as exc:
        print(f"dyndisc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (McmcAbort, SolverFailure, RuntimeError) as exc:
        print(f"dyndisc: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
