"""``swflow`` command line: register, evaluate, bench, synth, verify, replay.

Every command writes into ``--out`` (a directory) and finishes with an
atomically written ``manifest.json``.  Outputs are staged in a temporary
directory and only moved into place once the command has succeeded, so a
failed run leaves nothing behind.

Exit codes: 0 success, 1 bad input or configuration, 2 numerical abort,
3 a check failed (``verify`` or a ``replay`` mismatch).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path


from . import __version__
from . import discrepancy as dsc
from .geometry import MeshFormatError, load_mesh, make_rng, make_synthetic, save_mesh
from .metrics import discrepancy_timing_body, repeat_timing, surface_errors, write_report_csv
from .registration import (
    PRESETS,
    apply_affine,
    preset_config,
    register_affine,
    register_nonrigid,
)
from .validation import format_table, run_verification

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    """Bad arguments or configuration (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration files

CONFIG_KEYS = {
    "preset": str, "method": str, "objective": str, "seed": int,
    "n_steps": int, "n_swd": int, "n_chamfer": int,
    "lr": float, "lr_swd": float, "lr_chamfer": float,
    "lambda_lap": float, "n_projections": int,
    "alpha": float, "beta": float, "eps": float, "h": float, "damping": float,
    "center_align": "bool", "source": str, "target": str, "out": str,
}


def _to_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_config(path):
    """Parse a JSON object or flat ``key = value`` file (``#`` starts a comment)."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from None
    if text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: invalid JSON: {e}") from None
    else:
        raw = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{n}: expected key = value")
            raw[key.strip()] = val.strip()
    out = {}
    for key, val in raw.items():
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}: unknown config key {key!r}")
        kind = CONFIG_KEYS[key]
        try:
            out[key] = _to_bool(val) if kind == "bool" else kind(val)
        except (TypeError, ValueError):
            raise UsageError(f"{path}: bad value for {key!r}: {val!r}") from None
    return out


def resolve_config(mode, settings, workers):
    """Build a :class:`RegistrationConfig` from merged config/flag settings."""
    s = dict(settings)
    method = s.get("method", "adamflow")
    preset = s.get("preset", "synth-affine" if mode == "affine" else "synth-nonrigid")
    try:
        base = preset_config(preset, method)
    except KeyError as e:
        raise UsageError(str(e.args[0])) from None
    flow = base.flow
    flow_kw = {k: s[k] for k in ("alpha", "beta", "eps", "h", "damping") if k in s}
    if "lr" in s:
        flow_kw["lr"] = s["lr"]
    if "n_steps" in s:
        flow_kw["n_steps"] = s["n_steps"]
    obj_kw = {k: s[k] for k in ("lambda_lap", "n_projections") if k in s}
    reg_kw = {k: s[k] for k in ("n_swd", "n_chamfer", "lr_swd", "lr_chamfer", "center_align") if k in s}
    if "objective" in s:
        reg_kw["affine_objective" if mode == "affine" else "nonrigid_objective"] = s["objective"]
    try:
        return dataclasses.replace(
            base,
            flow=dataclasses.replace(flow, **flow_kw),
            objective=dataclasses.replace(base.objective, **obj_kw),
            seed=s.get("seed", 0),
            workers=workers,
            **reg_kw,
        )
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from None


# ---------------------------------------------------------------------------
# output staging and manifests

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json_atomic(obj, path):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Staging:
    """Temporary output directory promoted into ``out`` only on success.

    Files registered through :meth:`path` with ``timing=True`` hold
    wall-clock data and are excluded from replay comparisons.
    """

    def __init__(self, out):
        self.out = Path(out)
        self.files = {}

    def __enter__(self):
        parent = self.out.parent
        if not parent.is_dir():
            raise UsageError(f"output parent directory does not exist: {parent}")
        self.tmp = Path(tempfile.mkdtemp(dir=parent, prefix=f".{self.out.name}.staging-"))
        return self

    def path(self, name, timing=False):
        self.files[name] = timing
        return self.tmp / name

    def commit(self, manifest):
        self.out.mkdir(exist_ok=True)
        outputs, timing = {}, []
        for name, is_timing in sorted(self.files.items()):
            if is_timing:
                timing.append(name)
            else:
                outputs[name] = sha256_file(self.tmp / name)
            os.replace(self.tmp / name, self.out / name)
        manifest["outputs"] = outputs
        manifest["timing_outputs"] = timing
        write_json_atomic(manifest, self.out / MANIFEST)

    def __exit__(self, *exc):
        shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _manifest(command, argv, seed, inputs, config=None):
    return {
        "command": command,
        "argv": argv,
        "seed": seed,
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "version": __version__,
    }


def _load_mesh_or_fail(path):
    try:
        return load_mesh(path)
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except MeshFormatError as e:
        raise UsageError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# commands

def _registration_settings(args):
    settings = read_config(args.config) if args.config else {}
    for key in ("preset", "method", "objective", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            settings[key] = val
    if args.source is not None:
        settings["source"] = args.source
    if args.target is not None:
        settings["target"] = args.target
    if args.out is not None:
        settings["out"] = args.out
    for key in ("source", "target", "out"):
        if key not in settings:
            raise UsageError(f"missing {key} (give it on the command line or in --config)")
    return settings


def cmd_register(args, argv):
    settings = _registration_settings(args)
    cfg = resolve_config(args.mode, settings, args.threads)
    src = _load_mesh_or_fail(settings["source"])
    tgt = _load_mesh_or_fail(settings["target"])
    t0 = time.perf_counter()
    with Staging(settings["out"]) as st:
        if args.mode == "affine":
            T, hist = register_affine(src, tgt, cfg)
            moved = apply_affine(src, T)
            T.save(st.path("transform.txt"))
        else:
            disp, hist = register_nonrigid(src, tgt, cfg)
            moved = src.with_vertices(src.vertices + disp)
            dsc.save_gradfield_csv(disp, st.path("displacements.csv"))
        save_mesh(moved, st.path("registered.obj"))
        hist.to_csv(st.path("history.csv"), timing=False)
        _write_gnuplot(hist, st.path("history.dat"))
        _write_timings(hist, st.path("timings.csv", timing=True))
        config = dataclasses.asdict(cfg)
        man = _manifest("register", argv, cfg.seed, [settings["source"], settings["target"]], config)
        man["mode"] = args.mode
        man["wall_time_s"] = time.perf_counter() - t0
        st.commit(man)
    final = hist.objective[-1] if len(hist) else float("nan")
    print(f"{args.mode} registration: {len(hist)} steps, final objective {final:.6g}")
    return EXIT_OK


def _write_gnuplot(hist, path):
    with open(path, "w") as fh:
        fh.write("# step objective\n")
        for k, v in zip(hist.step, hist.objective):
            fh.write(f"{k} {v!r}\n")


def _write_timings(hist, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "elapsed_ms"])
        for k, t in zip(hist.step, hist.elapsed_ms):
            w.writerow([k, f"{t:.3f}"])


def cmd_evaluate(args, argv):
    a = _load_mesh_or_fail(args.mesh_a)
    b = _load_mesh_or_fail(args.mesh_b)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    seed = 0 if args.seed is None else args.seed
    t0 = time.perf_counter()
    rep = surface_errors(a, b, args.n, rng=seed, workers=args.threads)
    with Staging(args.out) as st:
        write_report_csv([(args.mesh_a, args.mesh_b, rep)], st.path("errors.csv"))
        man = _manifest("evaluate", argv, seed, [args.mesh_a, args.mesh_b], {"n": args.n})
        man["wall_time_s"] = time.perf_counter() - t0
        st.commit(man)
    print(f"assd {rep.assd:.6g} mm  hd90 {rep.hd90:.6g} mm  (n={rep.n_samples}, seed={seed})")
    return EXIT_OK


def cmd_bench(args, argv):
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad --sizes {args.sizes!r}") from None
    if not sizes or min(sizes) < 1:
        raise UsageError("sizes must be >= 1")
    if args.repeats < 1 or args.L < 1:
        raise UsageError("--repeats and --L must be >= 1")
    seed = 0 if args.seed is None else args.seed
    rng = make_rng(seed)
    rows = []
    t0 = time.perf_counter()
    for metric in args.metric:
        for n in sizes:
            x = rng.standard_normal((n, 3))
            y = rng.standard_normal((n, 3))
            mean, std = repeat_timing(
                discrepancy_timing_body(metric, x, y, args.L, rng, args.mode, args.threads),
                args.repeats,
            )
            rows.append((metric, n, args.L, mean, std))
            print(f"{metric:8s} N={n:6d} L={args.L} {args.mode:5s} {mean:9.3f} ms  (std {std:.3f})", flush=True)
    with Staging(args.out) as st:
        with open(st.path("bench.csv", timing=True), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "mode", "N", "L", "mean_ms", "std_ms"])
            for metric, n, L, mean, std in rows:
                w.writerow([metric, args.mode, n, L, f"{mean:.6f}", f"{std:.6f}"])
        cfg = {"metric": args.metric, "mode": args.mode, "sizes": sizes, "L": args.L, "repeats": args.repeats}
        man = _manifest("bench", argv, seed, [], cfg)
        man["wall_time_s"] = time.perf_counter() - t0
        st.commit(man)
    return EXIT_OK


def cmd_synth(args, argv):
    seed = 0 if args.seed is None else args.seed
    if args.subdivisions < 0:
        raise UsageError("--subdivisions must be >= 0")
    name = args.name
    if Path(name).suffix.lower() not in (".obj", ".ply") or Path(name).name != name:
        raise UsageError("--name must be a bare file name ending in .obj or .ply")
    try:
        mesh = make_synthetic(args.shape, args.subdivisions, rng=make_rng(seed), scale=args.scale)
    except ValueError as e:
        raise UsageError(str(e)) from None
    t0 = time.perf_counter()
    with Staging(args.out) as st:
        save_mesh(mesh, st.path(name))
        cfg = {"shape": args.shape, "subdivisions": args.subdivisions, "scale": args.scale}
        man = _manifest("synth", argv, seed, [], cfg)
        man["wall_time_s"] = time.perf_counter() - t0
        st.commit(man)
    print(f"{args.shape}: {mesh.n_vertices} vertices, {mesh.n_faces} faces -> {Path(args.out) / name}")
    return EXIT_OK


def cmd_verify(args, argv, impl=None):
    t0 = time.perf_counter()
    results = run_verification(impl=impl)
    table = format_table(results)
    print(table)
    ok = all(r.passed for r in results)
    if args.out is not None:
        with Staging(args.out) as st:
            st.path("verify.txt").write_text(table + "\n")
            man = _manifest("verify", argv, None, [], None)
            man["wall_time_s"] = time.perf_counter() - t0
            st.commit(man)
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed "
          f"in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_replay(args, argv):
    mpath = Path(args.manifest)
    try:
        man = json.loads(mpath.read_text())
        old_argv = list(man["argv"])
    except (OSError, ValueError, KeyError) as e:
        raise UsageError(f"cannot read manifest {mpath}: {e}") from None
    out = Path(args.out) if args.out else mpath.parent.with_name(mpath.parent.name + "-replay")
    new_argv = _replace_out(old_argv, str(out))
    code = main(new_argv)
    if code != EXIT_OK:
        return code
    new = json.loads((out / MANIFEST).read_text())
    mismatched = sorted(
        k for k in set(man["outputs"]) | set(new["outputs"])
        if man["outputs"].get(k) != new["outputs"].get(k)
    )
    if mismatched:
        print("replay mismatch: " + ", ".join(mismatched))
        return EXIT_CHECK
    print(f"replay identical: {len(new['outputs'])} outputs")
    return EXIT_OK


def _replace_out(argv, out):
    argv = list(argv)
    for i, a in enumerate(argv):
        if a == "--out" and i + 1 < len(argv):
            argv[i + 1] = out
            return argv
        if a.startswith("--out="):
            argv[i] = f"--out={out}"
            return argv
    return argv + ["--out", out]


# ---------------------------------------------------------------------------
# argument parsing

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (default 0)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker cap for nearest-neighbour queries (default $SWFLOW_THREADS or 1)")
    common.add_argument("--out", default=None, help="output directory")

    p = _Parser(prog="swflow", description=(__doc__ or "").splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("register", parents=[common], help="affine or non-rigid registration")
    r.add_argument("mode", choices=["affine", "nonrigid"])
    r.add_argument("source", nargs="?")
    r.add_argument("target", nargs="?")
    r.add_argument("--config", help="JSON or key=value config file")
    r.add_argument("--preset", choices=sorted(PRESETS))
    r.add_argument("--method", choices=["adamflow", "wgf", "hbf", "nesterov", "icp"])
    r.add_argument("--objective", help="affine: swd|icp; nonrigid: hybrid|swd|chamfer")

    e = sub.add_parser("evaluate", parents=[common], help="ASSD and HD90 between two meshes")
    e.add_argument("mesh_a")
    e.add_argument("mesh_b")
    e.add_argument("--n", type=int, default=50_000, help="samples per mesh (default 50000)")

    b = sub.add_parser("bench", parents=[common], help="discrepancy runtime benchmark")
    b.add_argument("--metric", nargs="+", choices=["swd", "chamfer", "icp"],
                   default=["swd", "chamfer", "icp"])
    b.add_argument("--sizes", default=",".join(str(n) for n in range(5000, 50001, 5000)))
    b.add_argument("--L", type=int, default=4)
    b.add_argument("--repeats", type=int, default=1000)
    b.add_argument("--mode", choices=["value", "step"], default="value",
                   help="time the distance only, or distance plus gradient")

    s = sub.add_parser("synth", parents=[common], help="write a synthetic closed mesh")
    s.add_argument("shape", help="sphere | ellipsoid(a,b,c) | perturbed-sphere(amp,freq)")
    s.add_argument("--subdivisions", type=int, default=3)
    s.add_argument("--scale", type=float, default=1.0)
    s.add_argument("--name", default="synth.obj", help="output file name inside --out")

    sub.add_parser("verify", parents=[common], help="run the oracle checks")

    rp = sub.add_parser("replay", help="re-run a manifest and compare outputs byte for byte")
    rp.add_argument("manifest")
    rp.add_argument("--out", default=None)
    return p


COMMANDS = {
    "register": cmd_register,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "synth": cmd_synth,
    "verify": cmd_verify,
    "replay": cmd_replay,
}


def _canonical_argv(argv):
    # absolute paths so a manifest replays from any working directory
    out = []
    for a in argv:
        out.append(str(Path(a).resolve()) if os.path.isfile(a) else a)
    return out


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command not in ("verify", "replay") and args.out is None and not (
            args.command == "register" and getattr(args, "config", None)
        ):
            raise UsageError("--out is required")
        if getattr(args, "threads", None) is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return COMMANDS[args.command](args, _canonical_argv(argv))
    except UsageError as e:
        print(f"swflow: error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except FloatingPointError as e:
        print(f"swflow: numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
