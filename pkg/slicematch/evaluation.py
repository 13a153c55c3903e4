# Correspondence quality: mean geodesic error, label transfer and segmentation mIoU.

import csv
import logging

import numpy as np

from .exceptions import DataException
from .mesh import geodesic_distances

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("pair_id", "geo_error_x100", "miou_coarse", "miou_fine")


def _read_integers(path, what):
    """
    Read a text file holding one integer per line; blank lines are skipped.
    """
    values = []
    with open(path, "r") as text_file:
        for number, line in enumerate(text_file, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                values.append(int(line))
            except ValueError:
                raise DataException("%s: line %d: expected an integer %s, got %s" % (path, number, what, repr(line)))
    if not values:
        raise DataException("%s: no %s entries" % (path, what))
    return np.array(values, dtype=np.int64)


class Correspondence(object):
    """
    A vertex map from a source mesh X to a target mesh Y: entry i is the Y vertex matched to X vertex i.
    """

    def __init__(self, indices, n_target=None):
        indices = np.array(indices, dtype=np.int64).reshape(-1)
        if len(indices) == 0:
            raise DataException("Correspondence is empty")
        if indices.min() < 0 or (n_target is not None and indices.max() >= n_target):
            raise DataException("Correspondence indices must lie in [0, %s), got range [%d, %d]"
                    % (n_target if n_target is not None else "n_y", indices.min(), indices.max()))
        indices.setflags(write=False)
        self.indices = indices
        self.n_target = n_target

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, index):
        return self.indices[index]

    def to_file(self, file_name):
        with open(file_name, "w") as corr_file:
            for index in self.indices:
                corr_file.write("%d\n" % index)

    @staticmethod
    def from_file(file_name, n_target=None):
        return Correspondence(_read_integers(file_name, "vertex index"), n_target)


class LabelField(object):
    """
    One integer class label per vertex, in [0, classes).
    """

    def __init__(self, labels, classes=None):
        labels = np.array(labels, dtype=np.int64).reshape(-1)
        if len(labels) == 0:
            raise DataException("Label field is empty")
        if classes is None:
            classes = int(labels.max()) + 1
        if labels.min() < 0 or labels.max() >= classes:
            raise DataException("Labels must lie in [0, %d), got range [%d, %d]" % (classes, labels.min(), labels.max()))
        labels.setflags(write=False)
        self.labels = labels
        self.classes = classes

    def __len__(self):
        return len(self.labels)

    def to_file(self, file_name):
        with open(file_name, "w") as label_file:
            for label in self.labels:
                label_file.write("%d\n" % label)

    @staticmethod
    def from_file(file_name, classes=None):
        return LabelField(_read_integers(file_name, "label"), classes)


def mean_geodesic_error(pred, gt, mesh_y):
    """
    Mean edge-graph geodesic distance on Y between predicted and true matches, divided by the square root of Y's
    surface area and multiplied by 100.
    """
    pred = pred.indices if isinstance(pred, Correspondence) else np.asarray(pred, dtype=np.int64)
    gt = gt.indices if isinstance(gt, Correspondence) else np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise DataException("Prediction has %d entries but the ground truth has %d" % (len(pred), len(gt)))
    if max(pred.max(), gt.max()) >= mesh_y.n_vertices or min(pred.min(), gt.min()) < 0:
        raise DataException("Correspondence index out of range for a target mesh with %d vertices" % mesh_y.n_vertices)

    sources, inverse = np.unique(gt, return_inverse=True)
    distances = geodesic_distances(mesh_y, sources)[inverse, pred]
    return 100.0 * float(np.mean(distances)) / np.sqrt(mesh_y.total_area)


def transfer_labels(corr, source_labels):
    """
    Label every vertex of the unlabeled mesh with the label of its matched vertex on the labeled mesh; `corr` maps
    unlabeled vertices to labeled ones.
    """
    indices = corr.indices if isinstance(corr, Correspondence) else np.asarray(corr, dtype=np.int64)
    if indices.min() < 0 or indices.max() >= len(source_labels):
        raise DataException("Correspondence points outside the %d labeled vertices" % len(source_labels))
    return LabelField(source_labels.labels[indices], source_labels.classes)


def segmentation_miou(pred, gt):
    """
    Mean intersection-over-union, over the classes present in the ground truth, as a percentage.
    """
    if len(pred) != len(gt):
        raise DataException("Label fields differ in size: %d and %d" % (len(pred), len(gt)))
    scores = []
    for label in np.unique(gt.labels):
        predicted, actual = pred.labels == label, gt.labels == label
        scores.append(np.sum(predicted & actual) / np.sum(predicted | actual))
    return 100.0 * float(np.mean(scores))


def mean_miou(pairs):
    """
    Average of per-mesh mIoU over (pred, gt) pairs.
    """
    if not pairs:
        raise DataException("No label fields to evaluate")
    return float(np.mean([segmentation_miou(pred, gt) for pred, gt in pairs]))


def write_report(path, rows):
    """
    Write evaluation rows (pair_id, geo_error_x100, miou_coarse, miou_fine) as CSV; missing metrics are None and
    left empty.
    """
    with open(path, "w", newline="") as report_file:
        writer = csv.writer(report_file)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            if len(row) != len(REPORT_COLUMNS):
                raise DataException("Report rows need %d columns, got %s" % (len(REPORT_COLUMNS), repr(row)))
            writer.writerow([row[0]] + ["" if value is None else "%.6f" % value for value in row[1:]])
    logger.info("Wrote %d evaluation rows to %s", len(rows), path)
