"""Command-line entry point: ``cumolos synth|train|infer|evaluate|plot``."""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import baselines, config as config_mod, plotting
from .errors import AlignmentError, CumolosError, FieldReadError, StateError
from .evaluation import evaluate_all, table_csv
from .field_io import VELOCITY_SCALE, extract_patches, generate_synthetic, load_field, preprocess, save_field
from .inference import ensemble, read_result, write_manifest, write_result
from .patching import CurriculumSchedule
from .training import TrainingLog, load_checkpoint, model_from_checkpoint, train

log = logging.getLogger("cumolos")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def resolve_files(items) -> list[Path]:
    files = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            files += sorted(q for q in p.iterdir() if q.suffix in (".cmls", ".nc"))
        else:
            files.append(p)
    missing = [str(p) for p in files if not p.exists()]
    if missing:
        raise FieldReadError("input files not found: " + ", ".join(missing))
    return files


def load_patches(files, cfg: config_mod.PipelineConfig):
    """Read, preprocess and tile every file; returns (patches, time_step_s, gate_spacing_m)."""
    fio = cfg.field_io
    patches, steps, spacing = [], set(), 30.0
    for path in files:
        field = preprocess(load_field(path, fio.variable_names), fio.snr_threshold, (fio.clamp_min, fio.clamp_max))
        steps.add(field.time_step_s)
        spacing = field.gate_spacing_m
        patches += extract_patches(field, fio.window_t, fio.window_g, fio.gate_limit, source=str(path))
    if len(steps) > 1:
        log.warning("input files disagree on time_step_s: %s", sorted(steps))
    return patches, (min(steps) if steps else None), spacing


def make_run_dir(base: Path, command: str, run_name: str | None) -> Path:
    base.mkdir(parents=True, exist_ok=True)
    if run_name:
        run = base / run_name
        if run.exists():
            raise CumolosError(f"run directory {run} already exists; refusing to overwrite")
    else:
        stamp = dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        run = base / f"{command}-{stamp}"
        k = 1
        while run.exists():
            run = base / f"{command}-{stamp}-{k}"
            k += 1
    run.mkdir(parents=True)
    return run


def _write_config(run: Path, cfg) -> None:
    (run / "config.yaml").write_text(cfg.dump())


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(cfg, run: Path, args) -> int:
    syn = cfg.synthetic
    n_train = syn.n_train_files if args.n_train is None else args.n_train
    n_test = syn.n_test_files if args.n_test is None else args.n_test
    suffix = ".nc" if syn.format == "nc" else ".cmls"
    written = []
    for split, count, offset in (("train", n_train, 0), ("test", n_test, syn.test_seed_offset)):
        if count == 0:
            continue
        (run / split).mkdir()
        for i in range(count):
            seed = syn.spec.seed + offset + i
            field = generate_synthetic(syn.spec, seed)
            written.append(save_field(field, run / split / f"{split}_{i:02d}{suffix}"))
    _write_config(run, cfg)
    for p in written:
        print(p)
    return EXIT_OK


def cmd_train(cfg, run: Path, args) -> int:
    files = resolve_files(args.train_files or cfg.paths.train_files)
    if not files:
        raise FieldReadError("no training files given (paths.train_files or --train-files)")
    patches, _, _ = load_patches(files, cfg)
    tcfg = cfg.training if args.epochs is None else replace(cfg.training, epochs=args.epochs)
    schedule = cfg.patching.curriculum
    if args.no_curriculum:
        schedule = replace(schedule, enabled=False)
    resume = load_checkpoint(args.resume) if args.resume else None
    _write_config(run, cfg)
    log.info("training on %d patches from %d files", len(patches), len(files))
    train(patches, cfg.model, tcfg, schedule, out_dir=run, resume=resume)
    print(run / "checkpoint.pt")
    print(run / "training_log.csv")
    return EXIT_OK


def _check_model_section(cfg, state) -> None:
    if "model" in getattr(cfg, "explicit_sections", ()) and asdict(cfg.model) != state["model_config"]:
        raise StateError(
            f"checkpoint (format v{state['version']}) was trained with model config {state['model_config']}, "
            f"but the config file specifies {asdict(cfg.model)}"
        )


def cmd_infer(cfg, run: Path, args) -> int:
    state = load_checkpoint(args.checkpoint)
    _check_model_section(cfg, state)
    model = model_from_checkpoint(state)
    files = resolve_files(args.inputs or cfg.paths.test_files)
    if not files:
        raise FieldReadError("no inference inputs given (paths.test_files or --inputs)")
    patches, step, spacing = load_patches(files, cfg)
    grid = tuple(state["grid_hw"])
    if patches and (patches[0].shape[0] // 2, patches[0].shape[1] // 2) != grid:
        raise StateError(f"checkpoint expects {2 * grid[0]}x{2 * grid[1]} windows, inputs give {patches[0].shape}")
    inf = cfg.inference
    n = inf.n_members if args.n is None else args.n
    limit = inf.max_patches if args.max_patches is None else args.max_patches
    if limit is not None:
        patches = patches[:limit]
    ratio = inf.mask_ratio if inf.mask_ratio is not None else CurriculumSchedule(**state["curriculum"]).r_end

    out = run / "patches"
    out.mkdir()
    entries = []
    for i, p in enumerate(patches):
        res = ensemble(p, model, n, inf.base_seed, mask_ratio=ratio, composition=inf.composition,
                       clamp=inf.clamp_output, batch_size=inf.batch_size, aggregation=inf.aggregation)
        name = f"patch_{i:05d}.cmls"
        write_result(out / name, res, p.validity)
        entries.append({"id": i, "file": name, "source": p.source, "t_origin": p.t_origin, "g_origin": p.g_origin})
    write_manifest(run / "manifest.json", entries, checkpoint=str(args.checkpoint), n_members=n,
                   member_seeds=list(range(inf.base_seed, inf.base_seed + n)), mask_ratio=ratio,
                   composition=inf.composition, aggregation=inf.aggregation, clamp_output=inf.clamp_output,
                   time_step_s=step, gate_spacing_m=spacing, field_io=asdict(cfg.field_io))
    _write_config(run, cfg)
    print(run)
    return EXIT_OK


def cmd_evaluate(cfg, run: Path, args) -> int:
    results = Path(args.results)
    manifest_path = results / "manifest.json"
    if not manifest_path.exists():
        raise FieldReadError(f"missing inference manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    eval_cfg = replace(cfg, field_io=config_mod.FieldIOConfig(**manifest["field_io"]))
    truth_files = resolve_files(args.truth or sorted({e["source"] for e in manifest["patches"]}))
    truth_all, step, spacing = load_patches(truth_files, eval_cfg)
    by_key = {(p.source, p.t_origin, p.g_origin): p for p in truth_all}

    truth, means, sigmas, missing = [], [], [], []
    for e in manifest["patches"]:
        key = (e["source"], e["t_origin"], e["g_origin"])
        if key not in by_key:
            missing.append(e["id"])
            continue
        res, _ = read_result(results / "patches" / e["file"], manifest["member_seeds"])
        truth.append(by_key[key])
        means.append(res.mean)
        sigmas.append(res.sigma)
    if missing:
        raise AlignmentError("inference records have no matching truth patch", missing)

    names = list(cfg.evaluate.reconstructors)
    if args.include_oracle and "oracle" not in names:
        names.append("oracle")
    recons = {}
    for name in names:
        if name == "cumolos":
            recons[name] = means
        elif name == "oracle":
            recons[name] = [p.physical() for p in truth]
        else:
            recons[name] = [baselines.RECONSTRUCTORS[name](p) * VELOCITY_SCALE for p in truth]
    evals = evaluate_all(truth, recons, step, cfg.evaluate.metrics, sigmas={"cumolos": sigmas})

    reports = [evals[n].report for n in names]
    (run / "metrics.csv").write_text(table_csv(reports))
    for r in reports:
        (run / f"metrics_{r.method}.txt").write_text(r.to_kv())
    diag = {r.method: r.to_flat() for r in reports if r.calibration is not None}
    (run / "diagnostics.json").write_text(json.dumps(diag, indent=2, sort_keys=True, default=float) + "\n")

    main_name = "cumolos" if "cumolos" in evals else names[0]
    spectral = evals[main_name].spectral
    first_src = truth[0].source
    pairs = spectral.pairs[: len(spectral.per_gate)]  # gates of the first source
    np.savez(
        run / "figure_data.npz",
        truth=np.stack([p.physical() for p in truth]),
        validity=np.stack([p.validity for p in truth]),
        mean=np.stack(evals[main_name].reconstructions),
        sigma=np.stack(sigmas),
        psd_freqs=pairs[0].freqs,
        psd_raw=np.stack([pr.p_raw for pr in pairs]),
        psd_den=np.stack([pr.p_den for pr in pairs]),
        psd_gates=np.array([pr.gate_index for pr in pairs]),
        time_step_s=step,
        gate_spacing_m=spacing,
        f_cut_hz=cfg.evaluate.metrics.f_cut_hz,
        source=first_src,
    )
    _write_config(run, cfg)
    print(run / "metrics.csv")
    return EXIT_OK


def cmd_plot(cfg, run: Path, args) -> int:
    results = Path(args.results)
    data_path = results / "figure_data.npz"
    missing = [str(p) for p in [data_path, *map(Path, args.train_logs or [])] if not p.exists()]
    if missing:
        raise FieldReadError("plot inputs not found: " + ", ".join(missing))
    d = np.load(data_path)
    i = args.patch
    if not 0 <= i < d["truth"].shape[0]:
        raise CumolosError(f"patch index {i} out of range (0..{d['truth'].shape[0] - 1})")
    step, spacing = float(d["time_step_s"]), float(d["gate_spacing_m"])
    gates = list(d["psd_gates"])
    sel = [gates.index(g) for g in args.gates if g in gates] or list(range(min(4, len(gates))))
    written = [
        plotting.plot_psd(d["psd_freqs"], d["psd_raw"][sel], d["psd_den"][sel], [gates[k] for k in sel],
                          run / "psd.png", float(d["f_cut_hz"])),
        plotting.plot_field(d["truth"][i], run / "original.png", title="original", time_step_s=step,
                            gate_spacing_m=spacing),
        plotting.plot_field(d["mean"][i], run / "reconstruction.png", title="reconstruction (ensemble mean)",
                            time_step_s=step, gate_spacing_m=spacing),
        plotting.plot_field(d["sigma"][i], run / "sigma.png", title="uncertainty (ensemble std)", time_step_s=step,
                            gate_spacing_m=spacing, cmap="magma", vmin=0.0, vmax=float(max(d["sigma"][i].max(), 1e-6)),
                            label="sigma [m/s]"),
    ]
    if args.train_logs:
        curves = []
        for p in args.train_logs:
            tl = TrainingLog.read_csv(p)
            curves.append((Path(p).parent.name or Path(p).stem, [r.epoch for r in tl.records],
                           [r.mean_loss for r in tl.records]))
        written.append(plotting.plot_loss_curves(curves, run / "loss_curves.png"))
    for p in written:
        print(p)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "evaluate": cmd_evaluate, "plot": cmd_plot}


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _global_flags(parser, suppress: bool):
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", metavar="PATH", **kw, help="pipeline config (YAML)")
    parser.add_argument("--seed", type=int, metavar="INT", **kw, help="override all seeds")
    parser.add_argument("--out", metavar="DIR", **kw, help="output base directory (env CUMOLOS_OUT wins)")
    parser.add_argument("--run-name", metavar="NAME", **kw, help="fixed run directory name")
    parser.add_argument("--print-config", action="store_true", **kw, help="print the resolved config and exit")
    parser.add_argument("-v", "--verbose", action="store_true", **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cumolos", description=__doc__)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command")
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    p = sub.add_parser("synth", parents=[common], help="write synthetic time-height files")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)

    p = sub.add_parser("train", parents=[common], help="train the masked autoencoder")
    p.add_argument("--train-files", nargs="+")
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-curriculum", action="store_true", help="fixed mask ratio r_end for all epochs")
    p.add_argument("--resume", metavar="CKPT")

    p = sub.add_parser("infer", parents=[common], help="Monte Carlo mask-ensemble inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--inputs", nargs="+")
    p.add_argument("-n", "--n", type=int, help="ensemble size")
    p.add_argument("--max-patches", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="score reconstructions into a metrics table")
    p.add_argument("--results", required=True, help="an infer run directory")
    p.add_argument("--truth", nargs="+", help="truth files (default: sources listed in the manifest)")
    p.add_argument("--include-oracle", action="store_true")

    p = sub.add_parser("plot", parents=[common], help="emit figure panels")
    p.add_argument("--results", required=True, help="an evaluate run directory")
    p.add_argument("--train-logs", nargs="+")
    p.add_argument("--patch", type=int, default=0)
    p.add_argument("--gates", type=int, nargs="+", default=[0, 8, 16, 32])
    return parser


def resolve_config(args) -> config_mod.PipelineConfig:
    cfg = config_mod.load_config(args.config)
    if args.seed is not None:
        cfg.synthetic.spec.seed = args.seed
        cfg.training.seed = args.seed
        cfg.inference.base_seed = args.seed
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(cfg.dump())
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_CONFIG
        base = Path(os.environ.get("CUMOLOS_OUT") or args.out or cfg.paths.output_dir)
        run = make_run_dir(base, args.command, args.run_name)
        return COMMANDS[args.command](cfg, run, args)
    except CumolosError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
