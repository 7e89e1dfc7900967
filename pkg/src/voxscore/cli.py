"""Command-line entry points.

Every subcommand is a thin wrapper: parse arguments, read files, call the
library, write outputs. Exit codes: 0 on success, 2 on usage errors (from
the argument parser), 1 on bad data or missing files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import evalkit, maskviz, moldata, tensornet, training
from .errors import FormatError, TrainingDivergedError
from .gridgen import (GridConfig, sample_transform, voxelize,
                      write_grid_dump)


def _load_radii(path: Path | None):
    if path is None:
        return None
    return moldata.load_radius_table(Path(path).read_text())


def _load_structure(path: Path, role: str, scheme, radii) -> moldata.Molecule:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"structure file {path} does not exist")
    if path.suffix == ".gninatypes":
        mol = moldata.parse_structure(path.read_bytes(), "gninatypes",
                                      name=path.stem, radii=radii)
    else:
        mol = moldata.parse_structure(path.read_text(), "text",
                                      name=path.stem, radii=radii)
    if mol.role != role:
        raise FormatError(f"{path}: expected a {role} structure, got {mol.role}")
    if mol.scheme != scheme.name:
        mol, _ = moldata.assign_types(mol, scheme)
    return mol


_GRID_KEYS = ("dimension", "resolution", "radius_multiplier", "occupancy", "scheme")


def _add_grid_args(p: argparse.ArgumentParser):
    p.add_argument("--dimension", type=float, help="grid side length in angstroms")
    p.add_argument("--resolution", type=float, help="grid spacing in angstroms")
    p.add_argument("--radius-multiplier", type=float, dest="radius_multiplier",
                   help="density cutoff as a multiple of the atomic radius")
    p.add_argument("--occupancy", choices=("gaussian", "boolean"))
    p.add_argument("--scheme", choices=("smina34", "element18", "binary2"))
    p.add_argument("--radii", type=Path, help="key=value van der Waals radius table")


def _grid_config(args, meta: dict | None = None) -> GridConfig:
    values = {}
    base = meta or {}
    for key in _GRID_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
        elif key in base:
            values[key] = base[key]
    if "scheme" in values and isinstance(values["scheme"], str):
        values["scheme"] = moldata.get_scheme(values["scheme"])
    return GridConfig(**values)


def _meta_for(config: GridConfig, base_width: int, dropout_ratio: float) -> dict:
    return {
        "dimension": config.dimension,
        "resolution": config.resolution,
        "radius_multiplier": config.radius_multiplier,
        "occupancy": config.occupancy,
        "scheme": config.scheme.name,
        "base_width": base_width,
        "dropout_ratio": dropout_ratio,
    }


def _read_meta(weights_path: Path) -> dict:
    meta_path = Path(str(weights_path) + ".meta.json")
    if not meta_path.exists():
        return {}
    return json.loads(meta_path.read_text())


def _build_spec(config: GridConfig, meta: dict, base_width_flag: int | None):
    base_width = base_width_flag if base_width_flag is not None \
        else meta.get("base_width", 32)
    dropout = meta.get("dropout_ratio", 0.5)
    return tensornet.build_final_model(config.channel_count, config.points_per_side,
                                       base_width=base_width, dropout_ratio=dropout)


def _parse_center(text: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != 3:
        raise FormatError(f"center must be x,y,z, got {text!r}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError:
        raise FormatError(f"center must be numeric, got {text!r}") from None


def _cmd_gridify(args) -> int:
    radii = _load_radii(args.radii)
    config = _grid_config(args)
    receptor = _load_structure(args.receptor, "receptor", config.scheme, radii)
    ligand = _load_structure(args.ligand, "ligand", config.scheme, radii)
    center = _parse_center(args.center) if args.center else ligand.typed_centroid()
    transform = None
    if args.rotate or args.max_translate > 0:
        rng = np.random.default_rng(args.seed)
        transform = sample_transform(rng, args.max_translate, args.rotate)
    grid = voxelize(receptor, ligand, center, config, transform)
    Path(args.out).write_bytes(write_grid_dump(grid.values, config.resolution))
    print(f"wrote {args.out}: {grid.values.shape[0]} channels, "
          f"{grid.values.shape[1]} points per side")
    return 0


def _cmd_folds(args) -> int:
    index = training.parse_index(Path(args.index).read_text())
    folds = training.make_folds(index, args.k)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, members in enumerate(folds):
        path = out_dir / f"fold_{i}.txt"
        path.write_text(training.format_index(index.subset(members)))
        clusters = {index.records[m].cluster_id for m in members}
        print(f"fold {i}: {len(members)} records, {len(clusters)} clusters -> {path}")
    return 0


def _solver_from_args(args) -> training.SolverConfig:
    if args.config:
        solver = training.parse_solver_config(Path(args.config).read_text())
    else:
        solver = training.SolverConfig()
    overrides = dict(s.split("=", 1) for s in args.set if "=" in s)
    bad = [s for s in args.set if "=" not in s]
    if bad:
        raise FormatError(f"--set expects key=value, got {bad[0]!r}")
    if overrides:
        text = training.format_solver_config(solver)
        values = dict(
            line.split(" = ", 1) for line in text.strip().splitlines()
        )
        unknown = set(overrides) - set(values)
        if unknown:
            raise FormatError(f"unknown solver key {sorted(unknown)[0]!r}")
        values.update(overrides)
        solver = training.parse_solver_config(
            "\n".join(f"{k} = {v}" for k, v in values.items())
        )
    if args.seed is not None:
        solver = dataclasses.replace(solver, seed=args.seed)
    return solver


def _parse_ratio(text: str) -> tuple[int, int]:
    parts = text.split(":")
    if len(parts) != 2:
        raise FormatError(f"ratio must be A:B, got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise FormatError(f"ratio must be integers, got {text!r}") from None


def _cmd_train(args) -> int:
    solver = _solver_from_args(args)
    radii = _load_radii(args.radii)
    config = _grid_config(args)
    index = training.parse_index(Path(args.index).read_text())
    data_root = Path(args.data_root) if args.data_root else Path(args.index).parent
    store = training.MoleculeStore(data_root, config.scheme, radii)

    eval_source = None
    if args.fold is not None:
        folds = training.make_folds(index, args.k)
        train_index, test_index = training.fold_split(index, folds, args.fold)
        eval_source = training.ComplexGridSource(test_index, config, store)
    else:
        train_index = index
    source = training.ComplexGridSource(train_index, config, store)

    mix_source = None
    if args.mix_index:
        mix_index = training.parse_index(Path(args.mix_index).read_text())
        mix_root = Path(args.mix_data_root) if args.mix_data_root \
            else Path(args.mix_index).parent
        mix_store = training.MoleculeStore(mix_root, config.scheme, radii)
        mix_source = training.ComplexGridSource(mix_index, config, mix_store)

    spec = tensornet.build_final_model(config.channel_count, config.points_per_side,
                                       base_width=args.base_width,
                                       dropout_ratio=solver.dropout_ratio)
    result = training.train(
        spec, solver, source,
        eval_source=eval_source,
        mix_with=mix_source,
        mix_ratio=_parse_ratio(args.mix_ratio),
        dtype=np.dtype(args.dtype).type,
        trace_every=args.trace_every,
        target_train_auc=args.target_train_auc,
    )

    out = Path(args.out)
    out.write_bytes(tensornet.save_weights(spec, result.weights))
    Path(str(out) + ".trace.tsv").write_text(training.format_trace(result.trace))
    Path(str(out) + ".meta.json").write_text(
        json.dumps(_meta_for(config, args.base_width, solver.dropout_ratio), indent=2)
    )
    last = result.trace[-1] if result.trace else None
    status = "stopped early" if result.stopped_early else "finished"
    detail = ""
    if last is not None:
        detail = f", loss {last.loss:.4f}"
        if last.train_auc is not None:
            detail += f", train auc {last.train_auc:.4f}"
        if last.eval_auc is not None:
            detail += f", eval auc {last.eval_auc:.4f}"
    print(f"{status} after {result.iterations_run} iterations{detail}; wrote {out}")
    return 0


def _cmd_score(args) -> int:
    meta = _read_meta(Path(args.weights))
    radii = _load_radii(args.radii)
    config = _grid_config(args, meta)
    spec = _build_spec(config, meta, args.base_width)
    weights = tensornet.load_weights(spec, Path(args.weights).read_bytes())
    index = training.parse_index(Path(args.index).read_text())
    data_root = Path(args.data_root) if args.data_root else Path(args.index).parent
    store = training.MoleculeStore(data_root, config.scheme, radii)
    source = training.ComplexGridSource(index, config, store)
    scores = training.score_positions(spec, weights, source)
    examples = training.scored_examples(index, scores)
    Path(args.out).write_text(evalkit.format_scores(examples))
    print(f"scored {len(examples)} poses -> {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    examples = evalkit.parse_scores(Path(args.scores).read_text())
    topn = tuple(int(n) for n in args.topn.split(","))
    report = evalkit.summarize(examples, topn=topn, trials=args.trials,
                               rng=np.random.default_rng(args.seed))
    text = evalkit.format_report(report)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    if args.roc_out:
        curve = report.curve
        lines = ["fpr\ttpr"]
        lines += [f"{f:.8g}\t{t:.8g}" for f, t in zip(curve.fpr, curve.tpr)]
        Path(args.roc_out).write_text("\n".join(lines) + "\n")
    return 0


def _cmd_rank(args) -> int:
    examples = evalkit.parse_scores(Path(args.scores).read_text())
    ranked = evalkit.rank_examples(examples)
    Path(args.out).write_text(evalkit.format_scores(ranked))
    print(f"ranked {len(ranked)} poses -> {args.out}")
    return 0


def _cmd_visualize(args) -> int:
    meta = _read_meta(Path(args.weights))
    radii = _load_radii(args.radii)
    config = _grid_config(args, meta)
    spec = _build_spec(config, meta, args.base_width)
    weights = tensornet.load_weights(spec, Path(args.weights).read_bytes())
    receptor = _load_structure(args.receptor, "receptor", config.scheme, radii)
    ligand = _load_structure(args.ligand, "ligand", config.scheme, radii)
    fragments = None
    if args.fragments:
        fragments = maskviz.parse_fragments(Path(args.fragments).read_text(),
                                            len(ligand.atoms))
    report = maskviz.mask_report(
        spec, weights, receptor, ligand, config,
        fragments=fragments,
        include_residues=not args.no_residues,
        threads=args.threads,
    )
    prefix = Path(args.out_prefix)
    lig_path = Path(str(prefix) + "_ligand.pdb")
    lig_path.write_text(maskviz.write_colored_structure(ligand, report.atom_values()))
    outputs = [str(lig_path)]
    if not args.no_residues:
        rec_path = Path(str(prefix) + "_receptor.pdb")
        rec_path.write_text(
            maskviz.write_colored_structure(receptor, report.residue_values(receptor))
        )
        outputs.append(str(rec_path))
    report_path = Path(str(prefix) + "_report.tsv")
    report_path.write_text(maskviz.format_mask_report(report))
    outputs.append(str(report_path))
    print(f"original score {report.original_score:.6f}; wrote {', '.join(outputs)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxscore",
        description="Voxelize protein-ligand complexes and score poses with "
                    "a small 3D convolutional network.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gridify", help="voxelize one complex to a binary grid dump")
    p.add_argument("--receptor", type=Path, required=True)
    p.add_argument("--ligand", type=Path, required=True)
    p.add_argument("--center", help="grid center as x,y,z (default: ligand centroid)")
    p.add_argument("--rotate", action="store_true", help="apply a random rotation")
    p.add_argument("--max-translate", type=float, default=0.0, dest="max_translate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    _add_grid_args(p)
    p.set_defaults(func=_cmd_gridify)

    p = sub.add_parser("folds", help="split an index into cluster-disjoint folds")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--out-dir", type=Path, required=True, dest="out_dir")
    p.set_defaults(func=_cmd_folds)

    p = sub.add_parser("train", help="train the convolutional scorer")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--config", type=Path, help="key=value solver config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one solver setting")
    p.add_argument("--seed", type=int, default=None,
                   help="override the solver seed")
    p.add_argument("--fold", type=int, default=None,
                   help="hold out this fold for evaluation")
    p.add_argument("--k", type=int, default=3, help="fold count for --fold")
    p.add_argument("--mix-index", type=Path, dest="mix_index",
                   help="second index blended into the batch stream")
    p.add_argument("--mix-ratio", default="2:1", dest="mix_ratio")
    p.add_argument("--mix-data-root", type=Path, dest="mix_data_root")
    p.add_argument("--data-root", type=Path, dest="data_root",
                   help="directory index paths are relative to (default: index directory)")
    p.add_argument("--base-width", type=int, default=32, dest="base_width")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--trace-every", type=int, default=250, dest="trace_every")
    p.add_argument("--target-train-auc", type=float, default=None,
                   dest="target_train_auc", help="stop once training AUC reaches this")
    p.add_argument("--out", type=Path, required=True)
    _add_grid_args(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("score", help="score indexed poses with trained weights")
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--data-root", type=Path, dest="data_root")
    p.add_argument("--base-width", type=int, default=None, dest="base_width")
    p.add_argument("--out", type=Path, required=True)
    _add_grid_args(p)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("evaluate", help="metric report from a scores file")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--topn", default="1,3,5", help="comma-separated top-n values")
    p.add_argument("--trials", type=int, default=2000,
                   help="shuffles for the random baseline")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.add_argument("--roc-out", type=Path, dest="roc_out",
                   help="write ROC curve points here")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("rank", help="sort a scores file by descending score")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_rank)

    p = sub.add_parser("visualize", help="per-atom and per-residue attribution")
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--receptor", type=Path, required=True)
    p.add_argument("--ligand", type=Path, required=True)
    p.add_argument("--fragments", type=Path,
                   help="fragment annotation file (fragment_id atom indices...)")
    p.add_argument("--no-residues", action="store_true", dest="no_residues")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--base-width", type=int, default=None, dest="base_width")
    p.add_argument("--out-prefix", required=True, dest="out_prefix")
    _add_grid_args(p)
    p.set_defaults(func=_cmd_visualize)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, TrainingDivergedError, FileNotFoundError,
            IsADirectoryError, NotADirectoryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
