"""Command-line interface.

Every subcommand writes its outputs plus ``manifest.json`` into ``--out-dir``.
The manifest records the resolved arguments, seeds, a config hash and the
SHA-256 of every input and output file; ``--from-manifest`` replays a run.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3
# checked after config and manifest merging, so these may come from either
REQUIRED = {
    "train": ("data",), "map": ("data",), "sample": ("data", "checkpoint"),
    "landscape": ("data", "checkpoint"), "metrics": ("ref", "rec"),
    "generalize": ("data", "checkpoint"),
}
MANIFEST = "manifest.json"
METHODS = {"map": "map", "deepen": "map", "sense": "sense", "pnp": "pnp", "pnp-ista": "pnp", "elder": "elder"}
# arguments that choose where things go, not what is computed
_LOCATION_KEYS = {"out_dir", "config", "from_manifest", "command", "threads", "verbose"}

log = logging.getLogger("deepen")


# --------------------------------------------------------------------------
# argument parsing

def _global(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 keeps runs bit-reproducible)")
    p.add_argument("--out-dir", default="out", help="output directory")
    p.add_argument("--config", help="flat key=value file; keys mirror the long flags")
    p.add_argument("--from-manifest", help="replay the arguments recorded in a manifest.json")
    p.add_argument("-v", "--verbose", action="store_true")


def _acq(p: argparse.ArgumentParser) -> None:
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--coils", type=int, default=2)
    p.add_argument("--mask", choices=["1d", "2d"], default="2d")
    p.add_argument("--acceleration", "--accel", type=float, default=4.0)
    p.add_argument("--acs-lines", type=int, default=8)
    p.add_argument("--noise-std", type=float, default=0.01)
    p.add_argument("--mask-seed", type=int, default=1)
    p.add_argument("--csm-seed", type=int, default=2)


def _mm(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rel-tol", "--tol", type=float, default=1e-6)
    p.add_argument("--max-outer", "--max-iter", type=int, default=500)
    p.add_argument("--cg-tol", type=float, default=1e-8)
    p.add_argument("--cg-max", type=int, default=50)
    p.add_argument("--lipschitz-mode", choices=["power_iteration", "backtracking", "fixed"],
                   default="backtracking")
    p.add_argument("--lipschitz", type=float, default=1.0)
    p.add_argument("--sense-lambda", type=float, default=1e-2)


def _langevin(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--langevin-iters", "--n-iter", type=int, default=100)
    p.add_argument("--init-std", type=float, default=0.1)
    p.add_argument("--unscaled", action="store_true", help="use the plain eps^2/2 step form")


def _indices(p: argparse.ArgumentParser) -> None:
    p.add_argument("--indices", default="all", help="comma list / a:b range of test images, or 'all'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize phantoms, coil maps, mask and k-space")
    _global(p)
    _acq(p)
    p.add_argument("--n-images", type=int, default=120)
    p.add_argument("--n-ellipses", type=int, default=6)

    p = sub.add_parser("train", help="train a DEEPEN energy, a DSM energy, or a denoiser")
    _global(p)
    _langevin(p)
    p.add_argument("--data", help="directory written by gen-data")
    p.add_argument("--mode", choices=["deepen", "dsm", "denoiser"], default="deepen")
    p.add_argument("--n-train", "--n-images", type=int, default=100, help="first N images are the training set")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", "--batch", type=int, default=10)
    p.add_argument("--learning-rate", "--lr", type=float, default=None, help="default depends on --profile")
    p.add_argument("--width", type=int, default=None, help="default depends on --profile")
    p.add_argument("--depth", type=int, default=5)
    p.add_argument("--energy-reg", type=float, default=None, help="default depends on --profile")
    p.add_argument("--lr-milestones", type=_int_list, default=None,
                   help="comma-separated epochs at which the learning rate drops (default depends on --profile)")
    p.add_argument("--lr-gamma", type=float, default=None, help="learning rate factor per milestone")
    p.add_argument("--profile", choices=["toy", "full"], default="toy")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", default="checkpoint.dpen", help="checkpoint file name inside --out-dir")

    p = sub.add_parser("map", help="reconstruct test measurements")
    _global(p)
    _mm(p)
    _indices(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint", help="model checkpoint (not needed for --method sense)")
    p.add_argument("--method", choices=sorted(METHODS), default="map",
                   help="map (alias deepen), sense, pnp (alias pnp-ista) or elder")
    p.add_argument("--weight", type=float, default=None,
                   help="prior weight for map (default 1 for ML-trained energies, eta^2 for dsm)")
    p.add_argument("--alpha", type=float, default=None,
                   help="step for pnp (default eta^2, a unit gradient step) or elder (default 0.5)")
    p.add_argument("--eta", type=float, default=0.01, help="noise level for pnp")
    p.add_argument("--previews", action=argparse.BooleanOptionalAction, default=True, help="PGM magnitude previews")

    p = sub.add_parser("sample", help="Langevin posterior samples: MMSE and variance maps")
    _global(p)
    _langevin(p)
    _indices(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--n-samples", type=int, default=100)
    p.add_argument("--previews", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--save-samples", action="store_true", help="also write every chain's final state")

    p = sub.add_parser("landscape", help="cost over SENSE-artifact / noise perturbation grid")
    _global(p)
    _indices(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--grid-points", type=int, default=41)
    p.add_argument("--alpha-min", type=float, default=-0.5)
    p.add_argument("--alpha-max", type=float, default=1.5)
    p.add_argument("--weight", type=float, default=None)

    p = sub.add_parser("metrics", help="PSNR/SSIM between reference and reconstruction grids")
    _global(p)
    p.add_argument("--ref", help="CGRD file or directory of them")
    p.add_argument("--rec", help="CGRD file or directory with matching names")

    p = sub.add_parser("generalize", help="MAP under other acquisition settings")
    _global(p)
    _mm(p)
    _indices(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--test", action="append", default=None, help="KIND:ACCEL, repeatable (e.g. 1d:2)")
    p.add_argument("--weight", type=float, default=None)
    return parser


def _int_list(text: str) -> tuple:
    """Parse ``"10,20"`` into ``(10, 20)``; an empty string is the empty tuple."""
    return tuple(int(s) for s in text.split(",") if s.strip())


def _read_config(path: str) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _apply_overrides(parser, argv, overrides: dict) -> argparse.Namespace:
    """Re-parse with ``overrides`` as defaults so explicit flags still win."""
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    args = parser.parse_args(argv)
    sp = sub.choices[args.command]
    known = {a.dest: a for a in sp._actions}
    defaults = {}
    for k, v in overrides.items():
        if k in ("command",) or k in _LOCATION_KEYS - {"threads"}:
            continue
        if k not in known:
            raise ValueError(f"unknown config key {k!r} for {args.command}")
        act = known[k]
        if isinstance(v, str):
            if act.nargs == 0 or isinstance(act, argparse.BooleanOptionalAction):
                v = v.lower() in ("1", "true", "yes", "on")
            elif isinstance(act, argparse._AppendAction):
                v = [s.strip() for s in v.split(",") if s.strip()]
            elif act.type is not None and v.lower() != "none":
                v = act.type(v)
            elif v.lower() == "none":
                v = None
        defaults[k] = v
    sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {}
    if args.from_manifest:
        man = json.loads(Path(args.from_manifest).read_text())
        if man.get("command") != args.command:
            raise ValueError(f"manifest is for {man.get('command')!r}, not {args.command!r}")
        overrides.update(man["args"])
    if args.config:
        overrides.update(_read_config(args.config))
    if overrides:
        args = _apply_overrides(parser, argv, overrides)
    missing = [k for k in REQUIRED.get(args.command, ()) if getattr(args, k) is None]
    if missing:
        raise ValueError(f"{args.command}: missing " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return args


# --------------------------------------------------------------------------
# helpers

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _select(spec: str, n: int) -> list:
    if spec == "all":
        return list(range(n))
    out = []
    for part in spec.split(","):
        if ":" in part:
            a, b = part.split(":")
            out += list(range(int(a or 0), int(b or n)))
        else:
            out.append(int(part))
    if any(i < 0 or i >= n for i in out):
        raise ValueError(f"index out of range 0..{n - 1}")
    return out


class Run:
    """Tracks inputs and outputs of one CLI invocation."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict = {}
        self.outputs: list = []
        self.extra: dict = {}

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(name)
        return p

    def input(self, path) -> Path:
        p = Path(path)
        if not p.exists():
            raise ValueError(f"missing input {p}")
        self.inputs[str(p)] = _sha256(p)
        return p

    def write_csv(self, name: str, header: list, rows: list) -> None:
        import csv
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])

    def finish(self) -> dict:
        from . import __version__
        import numpy as np
        recorded = {k: v for k, v in sorted(vars(self.args).items()) if k not in _LOCATION_KEYS}
        cfg_hash = hashlib.sha256(json.dumps(recorded, sort_keys=True).encode()).hexdigest()
        man = {
            "command": self.args.command,
            "version": __version__,
            "numpy": np.__version__,
            "threads": self.args.threads,
            "args": recorded,
            "config_hash": cfg_hash,
            "inputs": self.inputs,
            "outputs": {n: _sha256(self.out / n) for n in sorted(set(self.outputs))},
        }
        man.update(self.extra)
        (self.out / MANIFEST).write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
        return man


# --------------------------------------------------------------------------
# dataset directory

def _acq_from_args(args):
    from .phantoms import AcquisitionSpec
    return AcquisitionSpec(args.size, args.coils, args.mask, args.acceleration, args.acs_lines,
                           args.noise_std, args.mask_seed, args.csm_seed)


def _load_data(run: Run, data_dir: str):
    """Ground truth, k-space and the operator of a ``gen-data`` directory."""
    import numpy as np
    from . import io
    from .forward import ForwardOperator
    from .phantoms import AcquisitionSpec
    d = Path(data_dir)
    meta = json.loads(run.input(d / "dataset.json").read_text())
    acq = AcquisitionSpec(**meta["acquisition"])
    mask = io.load_mask(run.input(d / "mask.bin"))
    csm = io.load_csm(run.input(d / "csm.bin"))
    fwd = ForwardOperator(mask, csm, acq.noise_std)
    n = meta["n_images"]
    truth = np.stack([io.load_grid(run.input(d / "truth" / f"{i:04d}.cgrd")) for i in range(n)])
    kspace = np.stack([io.load_kspace(run.input(d / "kspace" / f"{i:04d}.kspc")) for i in range(n)])
    return meta, acq, fwd, truth, kspace


def _load_model(run: Run, path):
    from . import io
    net, meta, _ = io.load_checkpoint(run.input(path))
    return net, meta


def _weighted(model, weight, noise_std: float):
    """Scale a prior; by default 1 for ML-trained energies and eta^2 for score-matched ones."""
    from .solvers import ScaledEnergy
    if weight is None:
        weight = noise_std ** 2 if model.kind == "muse" else 1.0
    return model if weight == 1.0 else ScaledEnergy(model, weight)


# --------------------------------------------------------------------------
# subcommands

def cmd_gen_data(run: Run) -> None:
    from dataclasses import asdict
    from . import io
    from .experiments import measure
    from .phantoms import Dataset
    a = run.args
    acq = _acq_from_args(a)
    ds = Dataset.generate(a.n_images, acq, seed=a.seed, n_ellipses=a.n_ellipses)
    fwd = acq.operator()
    kspace = measure(fwd, ds.images, a.seed)
    io.save_mask(run.path("mask.bin"), fwd.mask)
    io.save_csm(run.path("csm.bin"), fwd.csm)
    for i, (x, y) in enumerate(zip(ds.images, kspace)):
        io.save_grid(run.path(f"truth/{i:04d}.cgrd"), x)
        io.save_kspace(run.path(f"kspace/{i:04d}.kspc"), y)
    meta = {"n_images": a.n_images, "seed": a.seed, "acquisition": asdict(acq),
            "acceleration_actual": fwd.mask.acceleration}
    run.path("dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    io.write_pgm(run.path("mask.pgm"), fwd.mask.pattern.astype(float))


def cmd_train(run: Run) -> None:
    from dataclasses import replace
    from . import io
    from .langevin import LangevinConfig
    from .phantoms import Dataset
    from .train import TrainConfig, checkpoint_meta, toy_config, train_deepen, train_denoiser, train_dsm
    a = run.args
    meta, acq, fwd, truth, _ = _load_data(run, a.data)
    if not 0 < a.n_train <= len(truth):
        raise ValueError(f"--n-train must be in 1..{len(truth)}")
    base = toy_config() if a.profile == "toy" else TrainConfig()
    cfg = replace(base, epochs=a.epochs, batch_size=a.batch_size, seed=a.seed, depth=a.depth,
                  learning_rate=base.learning_rate if a.learning_rate is None else a.learning_rate,
                  width=base.width if a.width is None else a.width,
                  energy_reg=base.energy_reg if a.energy_reg is None else a.energy_reg,
                  lr_milestones=base.lr_milestones if a.lr_milestones is None else tuple(a.lr_milestones),
                  lr_gamma=base.lr_gamma if a.lr_gamma is None else a.lr_gamma,
                  langevin=LangevinConfig(a.epsilon, a.langevin_iters, a.init_std, a.seed, not a.unscaled))
    ds = Dataset(truth[:a.n_train], acq, meta["seed"])
    net = state = None
    if a.resume:
        net, _, state = io.load_checkpoint(run.input(a.resume))
    ckpt = run.path(a.out)
    if a.mode == "deepen":
        net, state, tlog = train_deepen(ds, cfg, net=net, state=state, fwd=fwd)
    elif a.mode == "dsm":
        net, state, tlog = train_dsm(ds, cfg, net=net)
    else:
        net, state, tlog = train_denoiser(ds, cfg, den=net)
    io.save_checkpoint(ckpt, net, meta=checkpoint_meta(cfg, a.mode), opt=state)
    tlog.to_csv(run.path("train_log.csv"))
    run.extra["checkpoint_sha256"] = _sha256(ckpt)


def _test_indices(meta, spec: str) -> list:
    n = meta["n_images"]
    # by convention images past n_train are held out; the index list addresses them all
    return _select(spec, n)


def _mm_from_args(a):
    from .solvers import MmConfig
    return MmConfig(rel_tol=a.rel_tol, max_outer=a.max_outer, cg_tol=a.cg_tol, cg_max=a.cg_max,
                    lipschitz_mode=a.lipschitz_mode, lipschitz=a.lipschitz, sense_lambda=a.sense_lambda,
                    seed=a.seed)


def cmd_map(run: Run) -> None:
    from . import io
    from .experiments import run_method
    from .metrics import psnr, ssim
    a = run.args
    method = METHODS[a.method]
    meta, _, fwd, truth, kspace = _load_data(run, a.data)
    model = None
    if method != "sense":
        if not a.checkpoint:
            raise ValueError(f"--checkpoint is required for --method {a.method}")
        model, _ = _load_model(run, a.checkpoint)
        if method == "map":
            model = _weighted(model, a.weight, fwd.noise_std)
    alpha = a.alpha if a.alpha is not None else (a.eta ** 2 if method == "pnp" else 0.5)
    rows = []
    for i in _test_indices(meta, a.indices):
        rec, trace = run_method(method, model, fwd, kspace[i], _mm_from_args(a), alpha=alpha, eta=a.eta,
                                with_trace=True)
        io.save_grid(run.path(f"recon/{i:04d}.cgrd"), rec)
        if trace:
            run.write_csv(f"recon/{i:04d}_cost.csv", ["iteration", "cost"], [[k, float(c)] for k, c in enumerate(trace)])
        if a.previews:
            io.write_pgm(run.path(f"recon/{i:04d}.pgm"), rec, vmax=abs(truth[i]).max())
        rows.append([i, psnr(truth[i], rec), ssim(truth[i], rec)])
    run.write_csv("metrics.csv", ["index", "psnr", "ssim"], rows)


def cmd_sample(run: Run) -> None:
    from . import io
    from .langevin import LangevinConfig, sample_posterior
    from .metrics import psnr
    a = run.args
    meta, _, fwd, truth, kspace = _load_data(run, a.data)
    net, _ = _load_model(run, a.checkpoint)
    rows = []
    for i in _test_indices(meta, a.indices):
        cfg = LangevinConfig(a.epsilon, a.langevin_iters, a.init_std, a.seed * 1_000_003 + i, not a.unscaled)
        stats, samples = sample_posterior(net, fwd, kspace[i], cfg, a.n_samples)
        if a.save_samples:
            for k, x in enumerate(samples):
                io.save_grid(run.path(f"samples/{i:04d}/{k:04d}.cgrd"), x)
        io.save_grid(run.path(f"mmse/{i:04d}.cgrd"), stats.mean)
        io.save_grid(run.path(f"variance/{i:04d}.cgrd"), stats.variance.astype(complex))
        if a.previews:
            io.write_pgm(run.path(f"mmse/{i:04d}.pgm"), stats.mean, vmax=abs(truth[i]).max())
            io.write_pgm(run.path(f"variance/{i:04d}.pgm"), stats.variance)
        rows.append([i, psnr(truth[i], stats.mean), float(stats.variance.sum())])
    run.write_csv("sample_stats.csv", ["index", "mmse_psnr", "total_variance"], rows)


def cmd_landscape(run: Run) -> None:
    from . import io
    from .experiments import LANDSCAPE_Z_SEED, default_alpha_axis, landscape_sweep
    from .grid import RngStream
    a = run.args
    meta, _, fwd, truth, kspace = _load_data(run, a.data)
    net, _ = _load_model(run, a.checkpoint)
    net = _weighted(net, a.weight, fwd.noise_std)
    axis = default_alpha_axis(a.grid_points, a.alpha_min, a.alpha_max)
    rows = []
    for i in _test_indices(meta, a.indices):
        g = landscape_sweep(net, fwd, kspace[i], truth[i], axis, axis, RngStream(LANDSCAPE_Z_SEED).spawn(a.seed))
        run.write_csv(f"landscape/{i:04d}.csv", ["alpha_s", "alpha_z", "cost"],
                      [[float(s), float(z), float(g.costs[p, q])]
                       for p, s in enumerate(g.alpha_s) for q, z in enumerate(g.alpha_z)])
        io.save_grid(run.path(f"landscape/{i:04d}_xhat.cgrd"), g.x_hat)
        io.save_grid(run.path(f"landscape/{i:04d}_error.cgrd"), g.error)
        rows.append([i, g.minimizer[0], g.minimizer[1], g.minimizer_norm])
    run.write_csv("minimizers.csv", ["index", "alpha_s", "alpha_z", "norm"], rows)


def cmd_metrics(run: Run) -> None:
    from . import io
    from .metrics import psnr, ssim
    a = run.args
    ref, rec = Path(a.ref), Path(a.rec)
    pairs = ([(ref / p.name, p) for p in sorted(rec.glob("*.cgrd"))] if rec.is_dir() else [(ref, rec)])
    if not pairs:
        raise ValueError("no .cgrd files to compare")
    rows = []
    for r, c in pairs:
        x, y = io.load_grid(run.input(r)), io.load_grid(run.input(c))
        rows.append([c.name, psnr(x, y), ssim(x, y)])
    run.write_csv("metrics.csv", ["file", "psnr", "ssim"], rows)


def cmd_generalize(run: Run) -> None:
    import numpy as np
    from .experiments import generalization_run, parse_acquisition
    a = run.args
    meta, acq, _, truth, _ = _load_data(run, a.data)
    net, _ = _load_model(run, a.checkpoint)
    net = _weighted(net, a.weight, acq.noise_std)
    tests = [parse_acquisition(t, acq) for t in (a.test or ["1d:2"])]
    idx = _test_indices(meta, a.indices)
    rows = generalization_run(net, acq, tests, truth[idx], _mm_from_args(a), noise_seed=a.seed)
    run.write_csv("generalization.csv",
                  ["mask", "acceleration", "psnr_median", "ssim_median", "psnr_delta", "ssim_delta"],
                  [[r.acquisition.mask, r.acquisition.acceleration, float(np.median(r.report.psnr)),
                    float(np.median(r.report.ssim)), r.psnr_delta, r.ssim_delta] for r in rows])


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "map": cmd_map, "sample": cmd_sample,
    "landscape": cmd_landscape, "metrics": cmd_metrics, "generalize": cmd_generalize,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as e:  # argparse usage errors
        return EXIT_INVALID if e.code else EXIT_OK
    except (ValueError, OSError, json.JSONDecodeError) as err:
        print(f"deepen: error: {err}", file=sys.stderr)
        return EXIT_INVALID
    if args.threads < 1:
        print("deepen: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from .errors import DeepenError, DivergenceError
    try:
        run = Run(args)
        COMMANDS[args.command](run)
        run.finish()
    except DivergenceError as err:
        print(f"deepen: diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DeepenError, ValueError, OSError) as err:
        print(f"deepen: error: {err}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
