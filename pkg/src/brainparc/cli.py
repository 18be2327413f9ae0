"""Command-line interface: ``brainparc <subcommand> ...``.

Every file written is accompanied by ``<file>.prov.json`` listing input
digests, parameters, seed and tool version.  Exit codes: 0 success, 1 domain
error, 2 usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import secrets
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugmentConfig, random_augment
from .errors import BrainParcError
from .hierarchy import load_tree, production_tree
from .metrics import annual_pct_change, bland_altman, icv, mann_whitney_u, region_report, wilcoxon_signed_rank
from .nifti import LabelVolume, Volume, read_nifti, write_nifti
from .standardize import standardize

log = logging.getLogger("brainparc")

THREADS_ENV = "BRAINPARC_THREADS"


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_provenance(out, command, inputs, params, seed=None):
    record = {
        "tool": "brainparc",
        "version": __version__,
        "command": command,
        "inputs": {str(p): _digest(p) for p in inputs if p},
        "parameters": params,
        "seed": seed,
        "output_sha256": _digest(out),
    }
    Path(str(out) + ".prov.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _resolve_seed(seed):
    return secrets.randbits(63) if seed is None else seed


def _tree(path):
    return production_tree() if path in (None, "production") else load_tree(path)


def _read_numbers(path):
    values = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            values.extend(float(tok) for tok in line.replace(",", " ").split())
    return np.array(values)


# --------------------------------------------------------------------------
# subcommands


def cmd_standardize(args):
    vol = read_nifti(args.input, kind="label" if args.labels else "image")
    out = standardize(vol, side=args.side, spacing=args.spacing)
    if not args.labels:
        out = out.with_data(out.data.astype(np.float32), datatype_code=16)
    write_nifti(out, args.out)
    write_provenance(args.out, "standardize", [args.input], {"side": args.side, "spacing": args.spacing,
                                                              "labels": args.labels})
    return 0


def cmd_augment(args):
    if args.labels_in and not args.labels_out:
        print("usage error: --labels-out is required with --labels-in", file=sys.stderr)
        return 2
    config = AugmentConfig.from_file(args.config) if args.config else AugmentConfig()
    seed = _resolve_seed(args.seed if args.seed is not None else (config.seed if args.config else None))
    vol = read_nifti(args.input, kind="image")
    labels = read_nifti(args.labels_in, kind="label") if args.labels_in else None
    rng = np.random.default_rng(seed)
    out, out_labels, params = random_augment(vol, labels, config, rng)
    out = out.with_data(out.data.astype(np.float32), datatype_code=16)
    write_nifti(out, args.out)
    record = {"config": config.to_dict(), "sampled": params}
    write_provenance(args.out, "augment", [args.input, args.labels_in, args.config], record, seed)
    if out_labels is not None:
        write_nifti(out_labels, args.labels_out)
        write_provenance(args.labels_out, "augment", [args.input, args.labels_in, args.config], record, seed)
    return 0


def cmd_train(args):
    from .toy import Sample, TrainConfig, best_model, phantom_dataset, phantom_tree, train

    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    elif not args.config:
        config.seed = _resolve_seed(None)
    tree = phantom_tree() if args.tree is None and not args.pairs else _tree(args.tree)
    inputs = [args.config, None if args.tree in (None, "production") else args.tree]
    if args.pairs:
        samples = []
        for line in Path(args.pairs).read_text().splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            img_path, lab_path, *rest = line.split("\t")
            has_cavity = not rest or rest[0].strip().lower() not in ("0", "false", "no")
            samples.append(Sample(read_nifti(img_path, kind="image").data, read_nifti(lab_path, kind="label").data,
                                  has_cavity))
            inputs += [img_path, lab_path]
        n_val = max(1, len(samples) // 5)
        train_set, val_set = samples[:-n_val], samples[-n_val:]
    else:
        train_set = phantom_dataset(args.phantoms, config.seed, args.side, tree, args.missing_cavity)
        val_set = phantom_dataset(args.val, config.seed + 1, args.side, tree)
    state = train(train_set, val_set, tree, config)
    model = best_model(state, tree)
    model.save(args.out)
    params = {"config": config.to_dict(), "iterations": state.iteration, "best_iteration": state.best_iteration,
              "best_val_dsc": state.best_score, "parameter_count": model.parameter_count}
    if not args.pairs:
        params.update(phantoms=args.phantoms, val=args.val, side=args.side, missing_cavity=args.missing_cavity)
    write_provenance(args.out, "train", inputs, params, config.seed)
    print(json.dumps({"best_val_dsc": state.best_score, "iterations": state.iteration}))
    return 0


def cmd_segment(args):
    from .inference import segment_volume
    from .toy import ToyModel

    tree = _tree(args.tree)
    model = ToyModel.load(args.model, tree)
    vol = read_nifti(args.input, kind="image")
    seg = segment_volume(vol, model, tree, mode=args.mode, chunk=args.chunk, greedy=args.greedy)
    write_nifti(seg, args.out)
    write_provenance(args.out, "segment", [args.input, args.model, None if args.tree == "production" else args.tree],
                     {"mode": args.mode, "chunk": args.chunk, "greedy": args.greedy})
    return 0


def cmd_evaluate(args):
    pred = read_nifti(args.pred, kind="label")
    truth = read_nifti(args.truth, kind="label")
    tree = _tree(args.tree) if args.tree else None
    regions = [int(v) for v in _read_numbers(args.regions)] if args.regions else None
    report = region_report(pred, truth, tree, regions=regions)
    report.to_tsv(args.out)
    summary = Path(str(args.out) + ".summary.json")
    summary.write_text(report.to_json() + "\n")
    write_provenance(args.out, "evaluate", [args.pred, args.truth, args.tree, args.regions], {})
    print(json.dumps(report.summary, sort_keys=True))
    return 0


def cmd_icv(args):
    labels = read_nifti(args.labels, kind="label")
    value = icv(labels)
    print(json.dumps({"icv_mm3": value}))
    if args.out:
        Path(args.out).write_text(json.dumps({"icv_mm3": value}) + "\n")
        write_provenance(args.out, "icv", [args.labels], {})
    return 0


def cmd_stats(args):
    if args.test == "apc":
        result = {"annual_pct_change": annual_pct_change(args.baseline, args.followup, args.years)}
    else:
        a, b = _read_numbers(args.a), _read_numbers(args.b)
        if args.test == "wilcoxon":
            r = wilcoxon_signed_rank(a, b)
            result = {"statistic": r.statistic, "pvalue": r.pvalue, "exact": r.exact}
        elif args.test == "mannwhitney":
            r = mann_whitney_u(a, b)
            result = {"U": r.statistic, "pvalue": r.pvalue, "exact": r.exact}
        else:
            ba = bland_altman(a, b)
            result = ba.to_dict()
            if args.points:
                ba.write_points(args.points)
                write_provenance(args.points, "stats bland-altman", [args.a, args.b], {})
    text = json.dumps(result, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
        write_provenance(args.out, f"stats {args.test}", [getattr(args, "a", None), getattr(args, "b", None)], {})
    return 0


def cmd_phantom(args):
    from .toy import generate_phantom

    img, lab = generate_phantom(args.seed, args.side)
    write_nifti(img.with_data(img.data.astype(np.float32), datatype_code=16), args.out_image)
    write_nifti(lab, args.out_labels)
    for out in (args.out_image, args.out_labels):
        write_provenance(out, "phantom", [], {"side": args.side}, args.seed)
    return 0


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="brainparc", description="Brain MRI parcellation toolkit.")
    p.add_argument("--version", action="version", version=f"brainparc {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help=f"cap native thread pools (default: ${THREADS_ENV} or unlimited); 1 is bitwise deterministic")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("standardize", help="reorient to RAS, resample to 1 mm, normalise and pad/crop to a cube")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--labels", action="store_true", help="input is a label volume (nearest neighbour, no scaling)")
    s.add_argument("--side", type=int, default=256)
    s.add_argument("--spacing", type=float, default=1.0)
    s.set_defaults(func=cmd_standardize)

    s = sub.add_parser("augment", help="apply the random augmentation pipeline")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--labels-in")
    s.add_argument("--labels-out")
    s.add_argument("--config", help="JSON file with AugmentConfig keys")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("train", help="train the toy backbone on phantoms or image/label pairs")
    s.add_argument("--out", required=True)
    s.add_argument("--tree", help="tree file (default: built-in phantom tree; 'production' for the brain tree)")
    s.add_argument("--config", help="JSON file with TrainConfig keys")
    s.add_argument("--seed", type=int)
    s.add_argument("--pairs", help="TSV of image<TAB>labels[<TAB>has_cavity] paths")
    s.add_argument("--phantoms", type=int, default=20)
    s.add_argument("--val", type=int, default=5)
    s.add_argument("--side", type=int, default=32)
    s.add_argument("--missing-cavity", type=float, default=0.0, help="fraction of phantoms without cavity labels")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("segment", help="segment a standardised volume")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--tree", required=True)
    s.add_argument("--mode", choices=("fusion", "vote"), default="fusion")
    s.add_argument("--out", required=True)
    s.add_argument("--chunk", type=int, default=16)
    s.add_argument("--greedy", action="store_true", help="root-to-leaf descent instead of global argmax")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("evaluate", help="per-region DSC/VS report")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--tree")
    s.add_argument("--regions", help="file listing the region ids to keep")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("icv", help="intracranial volume of a label volume")
    s.add_argument("--labels", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_icv)

    s = sub.add_parser("stats", help="rank tests, Bland-Altman, annual change")
    tests = s.add_subparsers(dest="test", required=True)
    for name in ("wilcoxon", "mannwhitney", "bland-altman"):
        t = tests.add_parser(name)
        t.add_argument("--a", required=True, help="file of numbers (x, or first method)")
        t.add_argument("--b", required=True, help="file of numbers (y, or second method)")
        t.add_argument("--out")
        if name == "bland-altman":
            t.add_argument("--points", help="write (mean, difference) pairs as TSV")
    t = tests.add_parser("apc")
    t.add_argument("--baseline", type=float, required=True)
    t.add_argument("--followup", type=float, required=True)
    t.add_argument("--years", type=float, required=True)
    t.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("phantom", help="write a synthetic head phantom and its labels")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--side", type=int, default=32)
    s.add_argument("--out-image", required=True)
    s.add_argument("--out-labels", required=True)
    s.set_defaults(func=cmd_phantom)
    return p


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = args.threads
    if threads is None and os.environ.get(THREADS_ENV):
        threads = int(os.environ[THREADS_ENV])
    try:
        with _thread_limit(threads):
            return args.func(args)
    except BrainParcError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1
    except (KeyError, ValueError, OSError) as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())
