"""Command-line entry point: ``varmion <subcommand> [options]``.

Settings resolve as command-line flag > ``--config`` file > bundled
defaults of the geometry.  Every written artifact gets a
``<file>.provenance.json`` sidecar.  Errors print one JSON line on stderr
and exit with the error's code (2 usage, 3 missing file, 4 invalid input,
5 numerical failure, 6 format or configuration mismatch, 7 failed check).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, binio
from .errors import CheckFailed, ConfigMismatch, InvalidArgument, InvalidConfiguration, MissingFile, VarmionError

log = logging.getLogger("varmion")

DATA_DIR_ENV = "VARMION_DATA_DIR"
GEOMETRIES = ("cavity", "cylinder", "contraction")


# --- configuration ------------------------------------------------------------

def bundled_config(name: str) -> dict:
    try:
        text = resources.files("varmion").joinpath("configs", f"{name}.json").read_text()
    except FileNotFoundError as exc:
        raise MissingFile(f"no bundled config named {name!r}") from exc
    return json.loads(text)


def load_config(spec: str | None) -> dict:
    """A JSON file path, or the name of a bundled config."""
    if spec is None:
        return {}
    path = Path(spec)
    if path.suffix == ".json" or path.exists():
        if not path.is_file():
            raise MissingFile(f"config file not found: {path}")
        try:
            return json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InvalidConfiguration(f"config {path} is not valid JSON: {exc}") from exc
    return bundled_config(spec)


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


class Settings:
    """Layered lookup of dotted keys such as ``solver.dt``."""

    def __init__(self, user: dict, geometry: str | None = None):
        self.geometry = geometry or user.get("geometry")
        if self.geometry is not None and self.geometry not in GEOMETRIES:
            raise InvalidArgument(f"unknown geometry {self.geometry!r}")
        base = bundled_config(self.geometry) if self.geometry else {}
        if user.get("geometry") not in (None, self.geometry):
            raise ConfigMismatch(f"config is for geometry {user['geometry']!r}, not {self.geometry!r}")
        self.merged = _merge(base, user)
        self.merged["geometry"] = self.geometry
        self.used: dict = {}

    def get(self, key: str, flag=None, default=None):
        if flag is not None:
            value = flag
        else:
            node = self.merged
            for part in key.split("."):
                node = node.get(part) if isinstance(node, dict) else None
                if node is None:
                    break
            value = default if node is None else node
        self.used[key] = value
        return value


def data_path(p: str | None) -> Path | None:
    """Relative paths resolve against ``$VARMION_DATA_DIR`` when it is set."""
    if p is None:
        return None
    path = Path(p)
    base = os.environ.get(DATA_DIR_ENV)
    if base and not path.is_absolute():
        path = Path(base) / path
    return path


def existing(p: str | None, what: str) -> Path:
    path = data_path(p)
    if path is None:
        raise InvalidArgument(f"--{what} is required")
    if not path.is_file():
        raise MissingFile(f"{what} file not found: {path}")
    return path


def write_provenance(out: Path, command: str, settings: dict, inputs: dict | None = None) -> Path:
    side = out.with_name(out.name + ".provenance.json")
    record = {
        "tool": "varmion", "version": __version__, "command": command, "settings": settings,
        "inputs": {str(k): binio.sha256_file(v) for k, v in (inputs or {}).items()},
        "output": {"file": out.name, "sha256": binio.sha256_file(out)},
    }
    side.write_text(json.dumps(record, sort_keys=True, indent=1, default=_jsonable) + "\n")
    return side


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, (np.ndarray, tuple)):
        return list(v)
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"cannot serialize {type(v).__name__}")


def _out(p: str | None) -> Path:
    path = data_path(p)
    if path is None:
        raise InvalidArgument("--out is required")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _pair(text: str, sep: str = "x") -> tuple[int, int]:
    try:
        a, b = text.lower().split(sep)
        return int(a), int(b)
    except ValueError as exc:
        raise InvalidArgument(f"expected NX{sep}NY, got {text!r}") from exc


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise InvalidArgument(f"expected comma-separated numbers, got {text!r}") from exc


def _points(text: str) -> np.ndarray:
    pts = [_floats(chunk) for chunk in text.split(";") if chunk.strip()]
    if not pts or any(len(p) != 2 for p in pts):
        raise InvalidArgument(f"expected 'x,y;x,y;...', got {text!r}")
    return np.array(pts)


def _mesh_kwargs(s: Settings, args) -> dict:
    if s.geometry == "cavity":
        return {"n": int(s.get("mesh.n", getattr(args, "n", None)))}
    return {"target_h": float(s.get("mesh.target_h", getattr(args, "h", None)))}


# --- subcommands --------------------------------------------------------------

def cmd_mesh_info(args) -> int:
    from .geometry import BoundaryTag, build_mesh, export_mesh_json, save_mesh

    s = Settings(load_config(args.config), args.geometry)
    if s.geometry is None:
        raise InvalidArgument("--geometry is required")
    mesh = build_mesh(s.geometry, **_mesh_kwargs(s, args))
    counts = {BoundaryTag(t).name: int(n) for t, n in zip(*np.unique(mesh.boundary_tags, return_counts=True))}
    print(f"geometry: {mesh.geometry}")
    print(f"vertices: {mesh.n_vertices}")
    print(f"triangles: {mesh.n_triangles}")
    print(f"boundary_edges: {len(mesh.boundary_edges)}")
    print(f"area: {round(mesh.area(), 12)!r}")
    print("tags: " + " ".join(f"{k}={v}" for k, v in counts.items()))
    if args.out:
        out = _out(args.out)
        save_mesh(mesh, out)
        write_provenance(out, "mesh-info", s.used)
    if args.json:
        out = _out(args.json)
        export_mesh_json(mesh, out)
        write_provenance(out, "mesh-info", s.used)
    return 0


def cmd_solve(args) -> int:
    from .geometry import build_mesh
    from .ipcs import SolverConfig, experiment_inputs, save_trajectory, solve_transient

    s = Settings(load_config(args.config), args.geometry)
    if s.geometry is None:
        raise InvalidArgument("--geometry is required")
    mesh = build_mesh(s.geometry, **_mesh_kwargs(s, args))
    mu, f = s.get("mu", args.mu), s.get("f", args.f)
    if mu is None or f is None:
        raise InvalidArgument("--mu and --f are required")
    mu, f = float(mu), float(f)
    cfg = SolverConfig(float(s.get("solver.dt", args.dt)), float(s.get("solver.tau", args.tau)))
    record = None
    if args.frames:
        record = cfg.tau * np.arange(1, args.frames + 1) / args.frames
    traj = solve_transient(mesh, experiment_inputs(s.geometry, mu, f), cfg, record_times=record)
    out = _out(args.out)
    save_trajectory(traj, out)
    write_provenance(out, "solve", s.used)
    print(f"frames: {len(traj.times)}  max|u|: {np.abs(traj.velocity_frames).max():.6g}  "
          f"max|p|: {np.abs(traj.pressure_frames).max():.6g}")
    return 0


def cmd_generate(args) -> int:
    from .geometry import build_mesh, build_output_lattice, uniform_times
    from .ipcs import SolverConfig
    from .sensing import SensorLayout, generate_dataset, save_dataset

    s = Settings(load_config(args.config), args.geometry)
    if s.geometry is None:
        raise InvalidArgument("--geometry is required")
    mesh = build_mesh(s.geometry, **_mesh_kwargs(s, args))
    cfg = SolverConfig(float(s.get("solver.dt", args.dt)), float(s.get("solver.tau", args.tau)))
    if args.lattice:
        nx, ny = _pair(args.lattice)
    else:
        nx, ny = int(s.get("lattice.nx")), int(s.get("lattice.ny"))
    s.used["lattice.nx"], s.used["lattice.ny"] = nx, ny
    m = int(s.get("lattice.times", args.times))
    lattice = build_output_lattice(mesh, nx, ny, uniform_times(cfg.tau, m), cfg.tau)
    sensing = s.get("generate.sensing", args.sensing)
    if sensing == "amplitude":
        layout = SensorLayout.compressed(mesh, lattice)
    else:
        layout = SensorLayout.from_lattice(mesh, lattice, int(s.get("generate.sensor_times", args.sensor_times)))
    J = int(s.get("generate.instances", args.instances))
    seed = int(s.get("seed", args.seed, 0))
    override = 0.0 if args.zero_forcing else None
    s.used["zero_forcing"] = bool(args.zero_forcing)
    ds = generate_dataset(mesh, J, layout, lattice, cfg, seed, sensing=sensing, amplitude_override=override,
                          workers=max(1, args.threads or 1))
    out = _out(args.out)
    save_dataset(ds, out)
    write_provenance(out, "generate", s.used)
    print(f"records: {ds.n_records} of {J}  failures: {len(ds.failures)}  "
          f"target triples: {ds.n_target_triples}")
    return 0


def cmd_spacetime_check(args) -> int:
    from .spacetime import SpaceTimeBasis, structure_report

    basis = SpaceTimeBasis.tiny(args.intervals)
    report = structure_report(basis, rho=args.rho, mu=args.mu, seed=args.seed)
    failed = []
    for name, value in report.items():
        if name in ("n_unknowns", "rank"):
            print(f"{name}: {value}")
            continue
        ok = value <= args.tol
        failed += [] if ok else [name]
        print(f"{name}: {value:.3e} {'PASS' if ok else 'FAIL'}")
    if args.out:
        out = _out(args.out)
        out.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
        write_provenance(out, "spacetime-check", vars_clean(args))
    if report["rank"] < report["n_unknowns"]:
        failed.append("rank")
    if failed:
        raise CheckFailed("space-time checks failed: " + ", ".join(failed))
    return 0


def vars_clean(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def cmd_train(args) -> int:
    from .sensing import load_dataset, split_dataset
    from .training import TrainConfig, build_model, net_config_for, train
    from .network import save_model

    data = existing(args.data, "data")
    ds = load_dataset(data)
    s = Settings(load_config(args.config), ds.geometry)
    hidden = _floats(args.hidden) if args.hidden else s.get("train.hidden")
    s.used["train.hidden"] = [int(h) for h in hidden]
    split = _floats(args.split) if args.split else s.get("train.split", None, [0.8, 0.1, 0.1])
    s.used["train.split"] = split
    seed = int(s.get("seed", args.seed, 0))
    split_seed = int(s.get("train.split_seed", args.split_seed, seed))
    tr, va, te = split_dataset(ds, split, split_seed)
    net = net_config_for(ds, int(s.get("train.latent", args.latent)), [int(h) for h in hidden],
                         s.get("train.mode", args.mode))
    tcfg = TrainConfig(epochs=int(s.get("train.epochs", args.epochs)),
                       batch_size=int(s.get("train.batch_size", args.batch_size)),
                       lr=float(s.get("train.lr", args.lr)), seed=seed)
    params, history = train(net, tr, va, tcfg)
    model = build_model(params, tr, history, tcfg, dataset_hash=binio.sha256_file(data))
    model.meta["split"] = {"fractions": list(split), "seed": split_seed}
    out = _out(args.out)
    save_model(model, out)
    write_provenance(out, "train", s.used, {data.name: data})
    print(f"epochs: {len(history)}  train loss: {history.train[-1]:.6e}  "
          f"validation loss: {history.validation[-1]:.6e}  best: {min(history.validation):.6e}")
    return 0


def _model_and_split(args):
    from .network import load_model
    from .sensing import load_dataset, split_dataset

    model_path = existing(args.model, "model")
    data = existing(args.data, "data")
    model = load_model(model_path, dataset_hash=binio.sha256_file(data))
    ds = load_dataset(data)
    if ds.geometry != model.meta.get("geometry"):
        raise ConfigMismatch(f"model is for {model.meta.get('geometry')!r}, data for {ds.geometry!r}")
    if args.split == "all":
        part = ds
    else:
        sp = model.meta.get("split", {"fractions": [0.8, 0.1, 0.1], "seed": 0})
        parts = dict(zip(("train", "validation", "test"), split_dataset(ds, sp["fractions"], sp["seed"])))
        part = parts[args.split]
    return model, part, model_path, data


def cmd_evaluate(args) -> int:
    from .metrics import error_report

    model, part, model_path, data = _model_and_split(args)
    report = error_report(model, part)
    out = _out(args.out)
    out.write_text(report.to_json() + "\n")
    write_provenance(out, "evaluate", vars_clean(args), {model_path.name: model_path, data.name: data})
    print(f"records: {report.errors.size}  mean relative L2 error: {report.mean:.6g}  std: {report.std:.6g}")
    return 0


def cmd_predict(args) -> int:
    from .geometry import build_mesh, in_holes, locate_point
    from .metrics import write_csv
    from .network import load_model
    from .sensing import SensorLayout, sense_experiment

    model_path = existing(args.model, "model")
    model = load_model(model_path)
    meta = model.meta
    tau = float(meta["lattice"]["tau"])
    times = np.array(_floats(args.times))
    if times.size == 0 or np.any(times <= 0) or np.any(times > tau):
        raise InvalidArgument(f"prediction times must lie in (0, {tau}]")
    nx, ny = _pair(args.grid)
    mesh = build_mesh(meta["geometry"], **meta["mesh_params"])
    x0, y0, x1, y1 = mesh.bounding_box()
    X, Y = np.meshgrid(np.linspace(x0, x1, nx), np.linspace(y0, y1, ny))
    cand = np.column_stack([X.ravel(), Y.ravel()])
    keep = np.array([locate_point(mesh, p) is not None for p in cand]) & ~in_holes(mesh, cand)
    pts = cand[keep]
    layout = SensorLayout.from_arrays(model.layout_arrays)
    sensed = sense_experiment(meta["geometry"], layout, meta["sensing"], args.mu, args.f, args.rho)
    nodes = np.column_stack([np.tile(pts, (len(times), 1)), np.repeat(times, len(pts))])
    pred = model.predict_sample(sensed, nodes)
    out = _out(args.out)
    write_csv(out, ("x", "y", "t", "u1", "u2", "p"), np.column_stack([nodes, pred]))
    write_provenance(out, "predict", vars_clean(args), {model_path.name: model_path})
    print(f"points: {len(pts)}  times: {len(times)}  rows: {len(nodes)}")
    return 0


def cmd_export_plots(args) -> int:
    from .metrics import LossHistory, error_report, export_comparisons, export_error_histogram, export_loss_history

    model, part, model_path, data = _model_and_split(args)
    out_dir = data_path(args.out_dir)
    if out_dir is None:
        raise InvalidArgument("--out-dir is required")
    out_dir.mkdir(parents=True, exist_ok=True)
    if not 0 <= args.record < part.n_records:
        raise InvalidArgument(f"record index {args.record} outside the {args.split} split of {part.n_records}")
    times = _floats(args.times) if args.times else part.lattice.times[:: max(1, part.lattice.n_times // 5)]
    probes = _points(args.probes) if args.probes else part.lattice.points[:: max(1, part.lattice.n_points // 4)]
    export_comparisons(model, part, args.record, times, probes, out_dir)
    written = [out_dir / "snapshots.csv", out_dir / "trends.csv"]
    if "history" in model.meta:
        export_loss_history(LossHistory.from_dict(model.meta["history"]), out_dir / "loss.csv")
        written.append(out_dir / "loss.csv")
    export_error_histogram(error_report(model, part), out_dir / "error_histogram.csv")
    written.append(out_dir / "error_histogram.csv")
    for path in written:
        write_provenance(path, "export-plots", vars_clean(args), {model_path.name: model_path, data.name: data})
    print("wrote " + " ".join(p.name for p in written))
    return 0


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file or bundled config name")
    common.add_argument("--threads", type=int, help="cap on BLAS threads and worker processes")
    common.add_argument("--log-level", default="WARNING")

    parser = argparse.ArgumentParser(prog="varmion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    def mesh_flags(p):
        p.add_argument("--geometry", choices=GEOMETRIES)
        p.add_argument("--n", type=int, help="cavity cells per side")
        p.add_argument("--h", type=float, help="target edge length (cylinder, contraction)")

    p = add("mesh-info", cmd_mesh_info, "build a mesh and print its statistics")
    mesh_flags(p)
    p.add_argument("--out", help="binary mesh file")
    p.add_argument("--json", help="JSON mesh export")

    p = add("solve", cmd_solve, "run one solver trajectory")
    mesh_flags(p)
    p.add_argument("--mu", type=float)
    p.add_argument("--f", type=float, help="forcing amplitude")
    p.add_argument("--dt", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--frames", type=int, help="store this many uniform frames instead of every step")
    p.add_argument("--out", required=True)

    p = add("generate", cmd_generate, "generate a training dataset")
    mesh_flags(p)
    p.add_argument("--instances", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--lattice", help="output lattice NXxNY")
    p.add_argument("--times", type=int, help="number of output times")
    p.add_argument("--sensing", choices=("amplitude", "field"))
    p.add_argument("--sensor-times", type=int)
    p.add_argument("--zero-forcing", action="store_true")
    p.add_argument("--out", required=True)

    p = add("spacetime-check", cmd_spacetime_check, "check the space-time block structure")
    p.add_argument("--intervals", type=int, default=3)
    p.add_argument("--rho", type=float, default=1.3)
    p.add_argument("--mu", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--out")

    p = add("train", cmd_train, "train the operator network")
    p.add_argument("--data", required=True)
    p.add_argument("--latent", type=int)
    p.add_argument("--hidden", help="comma-separated hidden layer sizes")
    p.add_argument("--mode", choices=("simplified", "full"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--split", help="train,validation,test fractions")
    p.add_argument("--split-seed", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    for name, func, text in (("evaluate", cmd_evaluate, "error statistics on a split"),
                             ("export-plots", cmd_export_plots, "write plot-ready CSV tables")):
        p = add(name, func, text)
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", choices=("train", "validation", "test", "all"), default="test")
        if name == "evaluate":
            p.add_argument("--out", required=True)
        else:
            p.add_argument("--record", type=int, default=0, help="record index within the split")
            p.add_argument("--times", help="snapshot times, comma-separated")
            p.add_argument("--probes", help="probe points 'x,y;x,y'")
            p.add_argument("--out-dir", required=True)

    p = add("predict", cmd_predict, "evaluate a trained model on a grid")
    p.add_argument("--model", required=True)
    p.add_argument("--mu", type=float, required=True)
    p.add_argument("--f", type=float, required=True, help="forcing amplitude")
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--grid", default="64x64")
    p.add_argument("--times", required=True)
    p.add_argument("--out", required=True)
    return parser


def _error_line(code: str, exit_code: int, message: str) -> str:
    return json.dumps({"error": code, "exit_code": exit_code, "message": " ".join(str(message).split())})


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise InvalidArgument("--threads must be at least 1")
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            ctx = threadpool_limits(limits=args.threads)
        else:
            ctx = contextlib.nullcontext()
        with ctx:
            return args.func(args)
    except VarmionError as exc:
        print(_error_line(exc.code, exc.exit_code, exc), file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(_error_line(MissingFile.code, MissingFile.exit_code, exc), file=sys.stderr)
        return MissingFile.exit_code
    except OSError as exc:
        print(_error_line("io-error", 3, exc), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
