"""Four-factor representation analysis and local-vs-global norm reports."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from .data import Dataset, Partition, client_classes
from .errors import DegenerateNormError, IncompletePrototypeError
from .model import HeadKind, ModelParams, extract_features
from .tensor import NORM_EPS


def _unit_rows(m: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms < NORM_EPS):
        raise DegenerateNormError(f"{what} has a row with norm below {NORM_EPS:g}")
    return m / norms[:, None]


def _cosine_gram(rows: np.ndarray) -> np.ndarray:
    g = rows @ rows.T
    g = 0.5 * (g + g.T)
    return np.clip(g, -1.0, 1.0)


def compute_prototypes(model: ModelParams, dataset: Dataset, normalized: bool = False) -> np.ndarray:
    """Per-class mean feature, one column per class (shape ``d x C``)."""
    f = extract_features(model, dataset.x)
    if normalized:
        f = _unit_rows(f, "feature batch")
    counts = dataset.class_counts()
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise IncompletePrototypeError(f"classes without examples: {missing.tolist()}")
    sums = np.zeros((dataset.num_classes, f.shape[1]))
    np.add.at(sums, dataset.y, f)
    return (sums / counts[:, None]).T


def weight_similarity(classifier: np.ndarray) -> np.ndarray:
    return _cosine_gram(_unit_rows(np.asarray(classifier, dtype=np.float64), "classifier"))


def inter_class_similarity(prototypes: np.ndarray) -> np.ndarray:
    # columns are normalized so the matrix stays in [-1, 1]
    return _cosine_gram(_unit_rows(np.asarray(prototypes, dtype=np.float64).T, "prototype matrix"))


def intra_class_similarity(model: ModelParams, dataset: Dataset) -> np.ndarray:
    """Mean cosine between each example's feature and its (raw-mean) class prototype."""
    f = extract_features(model, dataset.x)
    unit = _unit_rows(f, "feature batch")
    protos = _unit_rows(compute_prototypes(model, dataset).T, "prototype matrix")
    cos = np.einsum("ij,ij->i", unit, protos[dataset.y])
    sums = np.bincount(dataset.y, weights=cos, minlength=dataset.num_classes)
    return np.clip(sums / dataset.class_counts(), -1.0, 1.0)


def prototype_weight_inner(model: ModelParams, dataset: Dataset) -> np.ndarray:
    protos = compute_prototypes(model, dataset).T
    return np.einsum("ij,ij->i", model.classifier, protos)


def prototype_weight_alignment(model: ModelParams, dataset: Dataset) -> np.ndarray:
    protos = _unit_rows(compute_prototypes(model, dataset).T, "prototype matrix")
    rows = _unit_rows(model.classifier, "classifier")
    return np.clip(np.einsum("ij,ij->i", rows, protos), -1.0, 1.0)


@dataclass
class FactorReport:
    weight_similarity: np.ndarray
    inter_class_similarity: np.ndarray
    intra_class_similarity: np.ndarray
    prototype_weight_alignment: np.ndarray
    prototype_weight_inner: np.ndarray
    round: int | None = None
    tag: str = "global"

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "FactorReport":
        arrays = {k: np.asarray(d[k], dtype=np.float64) for k in
                  ("weight_similarity", "inter_class_similarity", "intra_class_similarity",
                   "prototype_weight_alignment", "prototype_weight_inner")}
        return cls(**arrays, round=d.get("round"), tag=d.get("tag", "global"))


def factor_report(model: ModelParams, dataset: Dataset, round: int | None = None,
                  tag: str = "global") -> FactorReport:
    protos = compute_prototypes(model, dataset)
    return FactorReport(
        weight_similarity=weight_similarity(model.classifier),
        inter_class_similarity=inter_class_similarity(protos),
        intra_class_similarity=intra_class_similarity(model, dataset),
        prototype_weight_alignment=prototype_weight_alignment(model, dataset),
        prototype_weight_inner=prototype_weight_inner(model, dataset),
        round=round, tag=tag,
    )


def write_matrix_csv(matrix: np.ndarray, path) -> None:
    """Long format ``i, j, value`` for heatmaps."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "value"])
        for (i, j), v in np.ndenumerate(matrix):
            w.writerow([i, j, repr(float(v))])


# -------------------------------------------------------------- norm reports

def _mean_or_none(values: np.ndarray) -> float | None:
    return float(np.mean(values)) if values.size else None


@dataclass
class ClientNorms:
    client: int
    id_classes: list[int]
    weight_id: float | None
    weight_ood: float | None
    feature_id: float | None
    feature_ood: float | None


@dataclass
class NormReport:
    clients: list[ClientNorms]
    global_weight: float
    global_feature: float
    round: int | None = None
    gap: float | None = None
    weight_gap: float | None = None
    head_gap: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NormReport":
        d = dict(d)
        d["clients"] = [ClientNorms(**c) for c in d["clients"]]
        return cls(**d)

    def series(self) -> dict[str, float | None]:
        """Client-averaged curves: local ID/OOD weight and feature means plus globals."""
        def avg(attr):
            vals = [getattr(c, attr) for c in self.clients if getattr(c, attr) is not None]
            return float(np.mean(vals)) if vals else None
        return {"local_id_weight": avg("weight_id"), "local_ood_weight": avg("weight_ood"),
                "global_weight": self.global_weight, "local_id_feature": avg("feature_id"),
                "local_ood_feature": avg("feature_ood"), "global_feature": self.global_feature}


def head_input_norms(model: ModelParams, x) -> np.ndarray:
    """Norms of the vectors the classifier consumes: ``f`` or, for normalized heads, ``f/||f||``."""
    f = extract_features(model, x)
    if model.head.kind is not HeadKind.STANDARD:
        f = _unit_rows(f, "feature batch")
    return np.linalg.norm(f, axis=1)


def norm_report(local_models: Mapping[int, ModelParams], global_model: ModelParams, partition: Partition,
                train: Dataset, test: Dataset, round: int | None = None) -> NormReport:
    """Classifier-row and feature norm means, split into each client's ID and OOD classes.

    ``gap`` is the mean over clients of (local ID feature-norm mean - global
    feature-norm mean) on raw extractor outputs; ``head_gap`` is the same
    statistic on the classifier's input vectors. Clients whose ID test subset
    is empty are skipped.
    """
    g_feat = np.linalg.norm(extract_features(global_model, test.x), axis=1)
    g_head = head_input_norms(global_model, test.x).mean()
    hgaps = []
    g_weight = np.linalg.norm(global_model.classifier, axis=1)
    clients = []
    for n in sorted(local_models):
        model = local_models[n]
        ids = sorted(client_classes(partition, train, n))
        id_mask = np.zeros(model.num_classes, dtype=bool)
        id_mask[ids] = True
        w = np.linalg.norm(model.classifier, axis=1)
        f = np.linalg.norm(extract_features(model, test.x), axis=1)
        in_id = id_mask[test.y]
        if in_id.any():
            hgaps.append(head_input_norms(model, test.x[in_id]).mean() - g_head)
        clients.append(ClientNorms(n, ids, _mean_or_none(w[id_mask]), _mean_or_none(w[~id_mask]),
                                   _mean_or_none(f[in_id]), _mean_or_none(f[~in_id])))
    g_f, g_w = float(g_feat.mean()), float(g_weight.mean())
    fgaps = [c.feature_id - g_f for c in clients if c.feature_id is not None]
    wgaps = [c.weight_id - g_w for c in clients if c.weight_id is not None]
    return NormReport(clients, g_w, g_f, round,
                      float(np.mean(fgaps)) if fgaps else None,
                      float(np.mean(wgaps)) if wgaps else None,
                      float(np.mean(hgaps)) if hgaps else None)
