from typing import Sequence

import numpy as np
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support

from wsn_anomaly.data_classes import MetricsReport
from wsn_anomaly.errors import AlignmentError


def evaluate(predictions: Sequence[int], ground_truth: Sequence[int]) -> MetricsReport:
    """
    Binary node-level metrics with anomalous (1) as the positive class.
    Empty inputs and zero denominators report 0.
    """
    pred = np.asarray(predictions, dtype=np.int64).ravel()
    truth = np.asarray(ground_truth, dtype=np.int64).ravel()
    if pred.shape != truth.shape:
        raise AlignmentError(f"{pred.size} predictions for {truth.size} ground-truth labels")
    if pred.size == 0:
        return MetricsReport(TP=0, FP=0, FN=0, TN=0, precision=0.0, recall=0.0, f1=0.0)
    tn, fp, fn, tp = confusion_matrix(truth, pred, labels=[0, 1]).ravel()
    precision, recall, f1, _ = precision_recall_fscore_support(
        truth, pred, labels=[0, 1], pos_label=1, average="binary", zero_division=0
    )
    return MetricsReport(
        TP=int(tp),
        FP=int(fp),
        FN=int(fn),
        TN=int(tn),
        precision=float(precision),
        recall=float(recall),
        f1=float(f1),
    )


def majority_baseline(ground_truth: Sequence[int]) -> MetricsReport:
    truth = np.asarray(ground_truth, dtype=np.int64).ravel()
    majority = 1 if (truth == 1).sum() > (truth == 0).sum() else 0
    return evaluate(np.full_like(truth, majority), truth)
