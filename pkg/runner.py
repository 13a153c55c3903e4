#!/usr/bin/env python3
# Command-line runner for slicematch: preprocesses meshes, matches shape pairs, trains the feature refiner, and
# evaluates, transfers, benchmarks and visualizes correspondences.

import argparse
import csv
import logging
import os
import sys
from multiprocessing import Pool

import numpy as np
import torch

from slicematch import ot
from slicematch.align import OT_VARIANTS, compute_loss_parts, nn_map, normalize_rows, total_loss
from slicematch.config import WEIGHT_SCHEMES, PipelineConfig
from slicematch.evaluation import (Correspondence, LabelField, mean_geodesic_error, segmentation_miou,
        transfer_labels, write_report)
from slicematch.exceptions import DataException, NumericalException
from slicematch.mesh import cotangent_laplacian, load_mesh, write_ply
from slicematch.refine import TRACE_COLUMNS, FeatureRefiner, adaptive_refine, train_refiner
from slicematch.spectral import FeatureMatrix, SpectralBasis, compute_basis, wks

logger = logging.getLogger("slicematch.runner")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

# Settings a cached descriptor file depends on.
CACHE_KEYS = ("k", "wks_dim", "wks_variance")

# Configuration keys that have a command-line flag of the same name (with dashes).
FLAG_KEYS = ("k", "wks_dim", "seed", "weight_scheme", "ot_variant", "lambda1", "lambda2", "lambda3", "alpha1",
        "alpha2", "p", "n_projections", "tau", "lambda_reg", "iterations", "step_size", "max_step", "epsilon_rel",
        "sinkhorn_iters", "unrolled", "jobs")


class UsageError(Exception):
    """
    Bad command-line usage: unknown flags, invalid choices or flag combinations that make no sense.
    """
    pass


class ArgumentParser(argparse.ArgumentParser):
    """
    An argparse parser which reports usage problems as UsageError instead of exiting with status 2.
    """

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class Shape(object):
    """
    A mesh with its spectral basis and per-vertex descriptors.
    """

    def __init__(self, name, mesh, basis, descriptors):
        self.name = name
        self.mesh = mesh
        self.basis = basis
        self.descriptors = descriptors


def stem(path):
    return os.path.splitext(os.path.basename(path))[0]


def cache_paths(mesh_path, cache_dir):
    """
    The basis, descriptor and settings cache files of a mesh: <name>.spec, <name>.fmat and <name>.cfg.
    """
    return tuple(os.path.join(cache_dir, stem(mesh_path) + extension) for extension in (".spec", ".fmat", ".cfg"))


def prepare_shape(mesh_path, config, cache_dir=None):
    """
    Load a mesh and compute its basis and WKS descriptors, reusing cache files from `cache_dir` when present.

    A cached basis is reused (truncated) when it holds at least k eigenfunctions. Cached descriptors are reused only
    when <name>.cfg records the same k, wks_dim and wks_variance; anything else is recomputed.
    """
    mesh = load_mesh(mesh_path)
    stiffness, mass = cotangent_laplacian(mesh)
    basis_path, wks_path, settings_path = cache_paths(mesh_path, cache_dir) if cache_dir else (None, None, None)

    basis = None
    if basis_path and os.path.exists(basis_path):
        basis = SpectralBasis.from_file(basis_path, mass)
        if basis.k >= config.k:
            logger.debug("Reusing cached basis %s", basis_path)
            basis = basis.truncated(config.k)
        else:
            logger.info("%s holds %d eigenfunctions but k=%d was requested, recomputing", basis_path, basis.k, config.k)
            basis = None
    if basis is None:
        basis = compute_basis(stiffness, mass, config.k)

    descriptors = None
    if wks_path and os.path.exists(wks_path):
        cached = PipelineConfig.from_file(settings_path) if os.path.exists(settings_path) else None
        if cached is not None and all(cached.get(key) == config.get(key) for key in CACHE_KEYS):
            logger.debug("Reusing cached descriptors %s", wks_path)
            descriptors = FeatureMatrix.from_file(wks_path)
        else:
            logger.info("%s was computed with other settings, recomputing", wks_path)
    if descriptors is None:
        descriptors = wks(basis, config.wks_dim, config.wks_variance)
    return Shape(stem(mesh_path), mesh, basis, descriptors)


def cmd_preprocess(mesh_path, out_dir, config):
    """
    Write the basis (<name>.spec), the WKS descriptors (<name>.fmat) and the settings they were computed with
    (<name>.cfg) of a mesh to out_dir.
    """
    shape = prepare_shape(mesh_path, config)
    os.makedirs(out_dir, exist_ok=True)
    basis_path, wks_path, settings_path = cache_paths(mesh_path, out_dir)
    shape.basis.to_file(basis_path)
    shape.descriptors.to_file(wks_path)
    config.to_file(settings_path, CACHE_KEYS)
    print("%s: %d vertices, k=%d, lambda_max=%.6g, %d descriptors"
            % (shape.name, shape.mesh.n_vertices, shape.basis.k, shape.basis.eigenvalues[-1], shape.descriptors.dim))
    return shape


class MatchResult(object):

    def __init__(self, point_map, fmaps, trace):
        self.point_map = point_map
        self.fmaps = fmaps
        self.trace = trace


def match_shapes(shape_x, shape_y, config, refine=True, features=None, refiner=None):
    """
    Match two prepared shapes. Descriptors are the WKS unless `features` gives external (F_x, F_y); an optional
    refiner transforms them first. Features are row-normalized, then either refined adaptively or matched as is.
    """
    f_x, f_y = features if features is not None else (shape_x.descriptors, shape_y.descriptors)
    if f_x.rows != shape_x.mesh.n_vertices or f_y.rows != shape_y.mesh.n_vertices:
        raise DataException("Features have %d and %d rows but the meshes have %d and %d vertices"
                % (f_x.rows, f_y.rows, shape_x.mesh.n_vertices, shape_y.mesh.n_vertices))
    if refiner is not None:
        f_x, f_y = refiner.transform(f_x), refiner.transform(f_y)
    f_x, f_y = normalize_rows(f_x.values), normalize_rows(f_y.values)

    refine_config = config.refine
    if refine:
        result = adaptive_refine(shape_x.mesh, shape_y.mesh, shape_x.basis, shape_y.basis, f_x, f_y, refine_config)
        f_x, f_y, point_map, trace = result.features_x, result.features_y, result.point_map, result.trace
    else:
        point_map, trace = nn_map(f_x, f_y), None

    projections = ot.sample_projections(config.loss.n_projections, f_x.shape[1], config.loss.seed)
    with torch.no_grad():
        parts = compute_loss_parts(f_x, f_y, shape_x.basis, shape_y.basis, config.loss, projections, config.fmap)
    if not trace:
        trace = [[0] + parts.as_row() + [total_loss(parts, config.loss).item()]]
    return MatchResult(point_map, parts.pair, trace)


def write_trace(path, trace):
    with open(path, "w", newline="") as trace_file:
        writer = csv.writer(trace_file)
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            writer.writerow([row[0]] + ["%.12g" % value for value in row[1:]])


def run_match(job):
    """
    Match one pair and write correspondence.txt, fmap.fmap and trace.csv into its output directory. `job` is a
    tuple so the function can be handed to a process pool.
    """
    mesh_x_path, mesh_y_path, out_dir, config, options = job
    shape_x = prepare_shape(mesh_x_path, config, options.get("cache_dir"))
    shape_y = prepare_shape(mesh_y_path, config, options.get("cache_dir"))

    features = None
    if options.get("features"):
        features = tuple(FeatureMatrix.from_file(path) for path in options["features"])
    refiner = FeatureRefiner.from_file(options["refiner"]) if options.get("refiner") else None

    result = match_shapes(shape_x, shape_y, config, refine=not options.get("no_refine"), features=features,
            refiner=refiner)

    os.makedirs(out_dir, exist_ok=True)
    Correspondence(result.point_map, shape_y.mesh.n_vertices).to_file(os.path.join(out_dir, "correspondence.txt"))
    result.fmaps.to_file(os.path.join(out_dir, "fmap.fmap"))
    write_trace(os.path.join(out_dir, "trace.csv"), result.trace)
    return out_dir, result.trace[0][-1], result.trace[-1][-1]


def read_pairs(path):
    """
    Read a pair list: one 'mesh_x mesh_y [name]' per line; '#' starts a comment. Relative paths are resolved
    against the list's directory.
    """
    base = os.path.dirname(os.path.abspath(path))
    pairs = []
    with open(path, "r") as pairs_file:
        for number, line in enumerate(pairs_file, start=1):
            tokens = line.split("#", 1)[0].split()
            if not tokens:
                continue
            if len(tokens) not in (2, 3):
                raise DataException("%s: line %d: expected 'mesh_x mesh_y [name]'" % (path, number))
            mesh_x, mesh_y = (os.path.join(base, token) for token in tokens[:2])
            name = tokens[2] if len(tokens) == 3 else "%s-%s" % (stem(mesh_x), stem(mesh_y))
            pairs.append((mesh_x, mesh_y, name))
    if not pairs:
        raise DataException("%s: no pairs" % path)
    return pairs


def cmd_match(pairs, out_dir, config, options):
    """
    Match every (mesh_x, mesh_y, name) pair, using up to config.jobs processes; results are reported in input order.
    """
    jobs = [(x, y, out_dir if len(pairs) == 1 else os.path.join(out_dir, name), config, options)
            for x, y, name in pairs]
    if config.jobs > 1 and len(jobs) > 1:
        logger.info("Matching %d pairs with %d processes", len(jobs), min(config.jobs, len(jobs)))
        # One intra-op thread per worker process.
        with Pool(min(config.jobs, len(jobs)), initializer=torch.set_num_threads, initargs=(1,)) as pool:
            results = pool.map(run_match, jobs)
    else:
        results = [run_match(job) for job in jobs]

    for directory, initial, final in results:
        print("%s: objective %.6g -> %.6g" % (directory, initial, final))
    return results


def cmd_train(pairs, out_path, config, epochs, learning_rate, min_learning_rate):
    shapes = {}
    training = []
    for mesh_x, mesh_y, _ in pairs:
        for path in (mesh_x, mesh_y):
            if path not in shapes:
                shapes[path] = prepare_shape(path, config)
        x, y = shapes[mesh_x], shapes[mesh_y]
        training.append(((x.mesh, x.basis, x.descriptors), (y.mesh, y.basis, y.descriptors)))

    refiner, trace = train_refiner(training, config.refine, epochs=epochs, seed=config.seed,
            learning_rate=learning_rate, min_learning_rate=min_learning_rate)
    refiner.to_file(out_path)
    print("Trained refiner on %d pairs: loss %.6g -> %.6g" % (len(pairs), trace[0], trace[-1]))
    return refiner, trace


def cmd_eval(corr_path, gt_path, mesh_path, report_path=None, pair_id=None, coarse=None, fine=None):
    """
    Geodesic error of a correspondence against ground truth on the target mesh. `coarse` and `fine` optionally give
    (target labels, source ground-truth labels) file pairs, scored by transferring the target labels through the
    correspondence.
    """
    mesh_y = load_mesh(mesh_path)
    pred = Correspondence.from_file(corr_path, mesh_y.n_vertices)
    gt = Correspondence.from_file(gt_path, mesh_y.n_vertices)
    error = mean_geodesic_error(pred, gt, mesh_y)

    scores = []
    for label_files in (coarse, fine):
        if label_files is None:
            scores.append(None)
            continue
        target_labels, source_labels = (LabelField.from_file(path) for path in label_files)
        scores.append(segmentation_miou(transfer_labels(pred, target_labels), source_labels))

    row = (pair_id or stem(corr_path), error, scores[0], scores[1])
    print("%s: geodesic error x100 = %.4f" % (row[0], error)
            + "".join(", %s mIoU = %.2f" % (name, score) for name, score in zip(("coarse", "fine"), scores)
                    if score is not None))
    if report_path:
        write_report(report_path, [row])
    return row


def cmd_transfer(corr_path, labels_path, out_path):
    labels = LabelField.from_file(labels_path)
    transferred = transfer_labels(Correspondence.from_file(corr_path, len(labels)), labels)
    transferred.to_file(out_path)
    print("Transferred %d labels (%d classes) to %s" % (len(transferred), transferred.classes, out_path))
    return transferred


def cmd_bench(sizes, dims, n_projections, seed, out_path=None):
    rows = ot.bench(sizes, dims, n_projections, seed)
    stream = open(out_path, "w", newline="") if out_path else sys.stdout
    try:
        writer = csv.writer(stream)
        writer.writerow(ot.BENCH_COLUMNS)
        writer.writerows(rows)
    finally:
        if out_path:
            stream.close()
    return rows


def coordinate_colors(mesh):
    """
    RGB colors from vertex positions normalized to the mesh's bounding box.
    """
    low, high = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    return 255.0 * (mesh.vertices - low) / np.maximum(high - low, 1e-12)


def cmd_export_color(corr_path, mesh_x_path, mesh_y_path, out_x, out_y):
    """
    Color Y by position and pull the colors to X through the correspondence, writing both as PLY.
    """
    mesh_x, mesh_y = load_mesh(mesh_x_path), load_mesh(mesh_y_path)
    corr = Correspondence.from_file(corr_path, mesh_y.n_vertices)
    if len(corr) != mesh_x.n_vertices:
        raise DataException("%s has %d entries but %s has %d vertices"
                % (corr_path, len(corr), mesh_x_path, mesh_x.n_vertices))

    colors_y = coordinate_colors(mesh_y)
    write_ply(out_y, mesh_y, colors_y)
    write_ply(out_x, mesh_x, colors_y[corr.indices])
    print("Wrote %s and %s" % (out_x, out_y))


def add_config_flags(parser):
    parser.add_argument("--config", type=str, default=None, help="key = value configuration file; flags win")
    parser.add_argument("--k", type=int, default=None, help="number of eigenfunctions (default 200, published setting)")
    parser.add_argument("--wks-dim", type=int, default=None, help="WKS energies (default 128, published setting)")
    parser.add_argument("--seed", type=int, default=None, help="seed of projections and refiner init (default 0)")
    parser.add_argument("--weight-scheme", choices=WEIGHT_SCHEMES, default=None,
            help="vertex measure weights (default uniform)")
    parser.add_argument("--ot-variant", choices=OT_VARIANTS, default=None,
            help="alignment loss (default biEBSW, the best published ablation)")
    parser.add_argument("--lambda1", type=float, default=None,
            help="weight of the functional map structure loss (default 1.0, published setting)")
    parser.add_argument("--lambda2", type=float, default=None,
            help="weight of the alignment loss (default 100.0, published setting)")
    parser.add_argument("--lambda3", type=float, default=None,
            help="weight of the proper map loss (default 1.0, published setting)")
    parser.add_argument("--alpha1", type=float, default=None,
            help="bijectivity weight in the structure loss (default 1.0, published setting)")
    parser.add_argument("--alpha2", type=float, default=None,
            help="orthogonality weight in the structure loss (default 1.0, published setting)")
    parser.add_argument("--p", type=float, default=None, help="sliced Wasserstein order (default 2, published setting)")
    parser.add_argument("--n-projections", type=int, default=None,
            help="sliced Wasserstein slices L (default 200, published setting)")
    parser.add_argument("--tau", type=float, default=None,
            help="soft similarity temperature (default 0.07; unpublished, the usual contrastive value)")
    parser.add_argument("--lambda-reg", type=float, default=None,
            help="functional map mask weight (default 0.01; unpublished, chosen)")
    parser.add_argument("--iterations", type=int, default=None,
            help="refinement iterations T (default 12, published setting)")
    parser.add_argument("--step-size", type=float, default=None,
            help="first refinement step, RMS feature change per vertex (default 0.01; unpublished, chosen)")
    parser.add_argument("--max-step", type=float, default=None,
            help="largest refinement step after doubling (default 0.25; unpublished, chosen)")
    parser.add_argument("--epsilon-rel", type=float, default=None,
            help="Sinkhorn regularization relative to the largest cost (default 0.01; unpublished, chosen)")
    parser.add_argument("--sinkhorn-iters", type=int, default=None,
            help="Sinkhorn iteration budget per coupling during refinement (default 1000; unpublished, chosen)")
    parser.add_argument("--unrolled", action="store_const", const=True, default=None,
            help="differentiate through the Sinkhorn iterations (default frozen coupling)")
    parser.add_argument("--jobs", type=int, default=None, help="pairs matched in parallel (default 1)")


def load_config(args):
    config = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    config.override({key: getattr(args, key) for key in FLAG_KEYS})
    return config.validate()


def build_parser():
    formatter = argparse.ArgumentDefaultsHelpFormatter
    parser = ArgumentParser(description="Dense shape correspondence with functional maps and sliced Wasserstein losses")
    parser.add_argument("--verbose", action="store_true", help="log debug output")
    parser.add_argument("--quiet", action="store_true", help="only log errors")
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    preprocess = commands.add_parser("preprocess", formatter_class=formatter, help="cache basis and WKS of a mesh")
    preprocess.add_argument("mesh", type=str, help="OFF, PLY or OBJ mesh")
    preprocess.add_argument("out_dir", type=str, help="directory for the .spec and .fmat files")
    add_config_flags(preprocess)

    match = commands.add_parser("match", formatter_class=formatter, help="match a pair or a list of pairs")
    match.add_argument("meshes", type=str, nargs="*", help="mesh_x mesh_y (omit with --pairs)")
    match.add_argument("--pairs", type=str, default=None, help="file with one 'mesh_x mesh_y [name]' per line")
    match.add_argument("--out", type=str, default="out", help="output directory")
    match.add_argument("--cache", type=str, default=None, help="directory of preprocessed .spec/.fmat files")
    match.add_argument("--features", type=str, nargs=2, default=None, metavar=("X.fmat", "Y.fmat"),
            help="external per-vertex features replacing the WKS")
    match.add_argument("--refiner", type=str, default=None, help="trained refiner weights (.rfnw)")
    match.add_argument("--no-refine", action="store_true", help="skip adaptive refinement")
    add_config_flags(match)

    train = commands.add_parser("train", formatter_class=formatter, help="train the per-vertex feature refiner")
    train.add_argument("pairs", type=str, help="file with one 'mesh_x mesh_y [name]' per line")
    train.add_argument("out", type=str, help="refiner weights file (.rfnw)")
    train.add_argument("--epochs", type=int, default=50, help="training epochs")
    train.add_argument("--lr", type=float, default=1e-3, help="initial learning rate")
    train.add_argument("--min-lr", type=float, default=1e-4, help="final cosine-annealed learning rate")
    add_config_flags(train)

    evaluate = commands.add_parser("eval", formatter_class=formatter, help="score a correspondence")
    evaluate.add_argument("correspondence", type=str, help="predicted correspondence file")
    evaluate.add_argument("ground_truth", type=str, help="ground-truth correspondence file")
    evaluate.add_argument("mesh", type=str, help="target mesh Y")
    evaluate.add_argument("--report", type=str, default=None, help="CSV report to write")
    evaluate.add_argument("--pair-id", type=str, default=None, help="report row id (default correspondence name)")
    evaluate.add_argument("--coarse-labels", type=str, nargs=2, default=None, metavar=("Y_LABELS", "X_GT"),
            help="coarse segmentation: labels on Y and ground truth on X")
    evaluate.add_argument("--fine-labels", type=str, nargs=2, default=None, metavar=("Y_LABELS", "X_GT"),
            help="fine segmentation: labels on Y and ground truth on X")

    transfer = commands.add_parser("transfer", formatter_class=formatter, help="transfer labels through a map")
    transfer.add_argument("correspondence", type=str, help="correspondence from the unlabeled to the labeled mesh")
    transfer.add_argument("labels", type=str, help="labels of the labeled mesh")
    transfer.add_argument("out", type=str, help="output label file")

    bench = commands.add_parser("bench", formatter_class=formatter, help="time SW against Sinkhorn")
    bench.add_argument("--sizes", type=int, nargs="+", default=[1000, 2000, 4000], help="point counts")
    bench.add_argument("--dims", type=int, nargs="+", default=[256], help="feature dimensions")
    bench.add_argument("--n-projections", type=int, default=200, help="slices L")
    bench.add_argument("--seed", type=int, default=0, help="random seed")
    bench.add_argument("--out", type=str, default=None, help="CSV file (default stdout)")

    export = commands.add_parser("export-color", formatter_class=formatter, help="color transfer as PLY files")
    export.add_argument("correspondence", type=str, help="correspondence from X to Y")
    export.add_argument("mesh_x", type=str, help="source mesh X")
    export.add_argument("mesh_y", type=str, help="target mesh Y")
    export.add_argument("out_x", type=str, help="PLY for X")
    export.add_argument("out_y", type=str, help="PLY for Y")

    return parser


def run(args):
    if args.command == "preprocess":
        cmd_preprocess(args.mesh, args.out_dir, load_config(args))
    elif args.command == "match":
        if args.pairs and args.meshes:
            raise UsageError("give either two meshes or --pairs, not both")
        if not args.pairs and len(args.meshes) != 2:
            raise UsageError("match needs exactly two meshes (or --pairs)")
        if args.pairs and args.features:
            raise UsageError("--features applies to a single pair only")
        pairs = read_pairs(args.pairs) if args.pairs else [(args.meshes[0], args.meshes[1], "pair")]
        options = {"cache_dir": args.cache, "features": args.features, "refiner": args.refiner,
                "no_refine": args.no_refine}
        cmd_match(pairs, args.out, load_config(args), options)
    elif args.command == "train":
        cmd_train(read_pairs(args.pairs), args.out, load_config(args), args.epochs, args.lr, args.min_lr)
    elif args.command == "eval":
        cmd_eval(args.correspondence, args.ground_truth, args.mesh, args.report, args.pair_id, args.coarse_labels,
                args.fine_labels)
    elif args.command == "transfer":
        cmd_transfer(args.correspondence, args.labels, args.out)
    elif args.command == "bench":
        cmd_bench(args.sizes, args.dims, args.n_projections, args.seed, args.out)
    elif args.command == "export-color":
        cmd_export_color(args.correspondence, args.mesh_x, args.mesh_y, args.out_x, args.out_y)


def main(argv=None):
    """
    Run a command and return its exit status: 0 on success, 1 for usage errors, 2 for bad or unreadable data and
    3 for numerical failures.
    """
    try:
        args = build_parser().parse_args(argv)
    except UsageError as error:
        print("error: %s" % error, file=sys.stderr)
        return EXIT_USAGE

    level = logging.DEBUG if args.verbose else logging.ERROR if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    try:
        run(args)
    except UsageError as error:
        print("error: %s" % error, file=sys.stderr)
        return EXIT_USAGE
    except (DataException, OSError) as error:
        print("data error: %s" % error, file=sys.stderr)
        return EXIT_DATA
    except NumericalException as error:
        print("numerical error: %s" % error, file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
