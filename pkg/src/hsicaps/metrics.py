"""Training objective and evaluation statistics.

The loss is a two-sided squared hinge on class-capsule lengths; evaluation
accumulates an integer confusion matrix and derives overall accuracy, average
per-class accuracy, and the chance-corrected agreement coefficient from it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ConfusionMatrix",
    "MarginConfig",
    "MetricsResult",
    "format_metrics_kv",
    "format_metrics_table",
    "margin_loss",
    "margin_loss_batch",
]


@dataclass(frozen=True)
class MarginConfig:
    """Margins of the two-sided hinge on capsule lengths.

    The present class is pushed above ``positive_margin``, absent classes
    below ``negative_margin``; ``negative_weight`` scales the absent-class
    side so early training is not dominated by shrinking every capsule.
    """

    positive_margin: float = 0.9
    negative_margin: float = 0.1
    negative_weight: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.positive_margin < 1.0:
            raise ValueError(f"positive_margin must be in (0, 1), got {self.positive_margin}")
        if not 0.0 < self.negative_margin < 1.0:
            raise ValueError(f"negative_margin must be in (0, 1), got {self.negative_margin}")
        if self.negative_margin >= self.positive_margin:
            raise ValueError(
                f"negative_margin {self.negative_margin} must lie below "
                f"positive_margin {self.positive_margin}"
            )
        if self.negative_weight < 0:
            raise ValueError(f"negative_weight must be >= 0, got {self.negative_weight}")


def margin_loss(
    activations: np.ndarray, true_class: int, config: MarginConfig = MarginConfig()
) -> tuple[float, np.ndarray]:
    """Loss and its gradient wrt the class-capsule activations of one sample.

    ``activations`` is (classes, dim) and ``true_class`` is 1-based.  With
    lengths v_k the loss is

        sum_k [ T_k * max(0, m+ - v_k)^2
                + w * (1 - T_k) * max(0, v_k - m-)^2 ]

    where T is the one-hot truth.  The gradient at an exactly zero-length
    capsule is taken as zero.
    """
    activations = np.asarray(activations, dtype=np.float64)
    if activations.ndim != 2:
        raise ValueError(f"activations must be (classes, dim), got {activations.shape}")
    num_classes = activations.shape[0]
    if not 1 <= true_class <= num_classes:
        raise ValueError(f"true_class must be in [1, {num_classes}], got {true_class}")
    loss, grad = margin_loss_batch(
        activations[None], np.array([true_class]), config, reduce_mean=False
    )
    return float(loss), grad[0]


def margin_loss_batch(
    activations: np.ndarray,
    true_classes: np.ndarray,
    config: MarginConfig = MarginConfig(),
    reduce_mean: bool = True,
) -> tuple[float, np.ndarray]:
    """Batched margin loss: mean (or sum) over samples, plus gradient.

    ``activations`` is (B, classes, dim), ``true_classes`` (B,) 1-based.  The
    returned gradient matches the returned scalar, i.e. it already carries the
    1/B of the mean when ``reduce_mean``.
    """
    activations = np.asarray(activations, dtype=np.float64)
    true_classes = np.asarray(true_classes)
    if activations.ndim != 3:
        raise ValueError(f"activations must be (B, classes, dim), got {activations.shape}")
    batch, num_classes, _ = activations.shape
    if true_classes.shape != (batch,):
        raise ValueError(f"true_classes must be ({batch},), got {true_classes.shape}")
    if ((true_classes < 1) | (true_classes > num_classes)).any():
        raise ValueError(f"class ids must be in [1, {num_classes}]")

    lengths = np.linalg.norm(activations, axis=-1)
    onehot = np.zeros((batch, num_classes))
    onehot[np.arange(batch), true_classes - 1] = 1.0

    present_gap = np.maximum(0.0, config.positive_margin - lengths)
    absent_gap = np.maximum(0.0, lengths - config.negative_margin)
    per_sample = (
        onehot * present_gap**2
        + config.negative_weight * (1.0 - onehot) * absent_gap**2
    ).sum(axis=1)

    d_length = (
        -2.0 * onehot * present_gap
        + 2.0 * config.negative_weight * (1.0 - onehot) * absent_gap
    )
    inv_length = np.divide(
        1.0, lengths, out=np.zeros_like(lengths), where=lengths > 0
    )
    grad = (d_length * inv_length)[..., None] * activations

    if reduce_mean:
        return float(per_sample.mean()), grad / batch
    return float(per_sample.sum()), grad


@dataclass
class MetricsResult:
    """Summary statistics of one confusion matrix.

    ``per_class`` holds each class's recall, NaN for classes with no test
    support; those ids are listed in ``excluded_classes`` and are left out of
    the average accuracy.  ``kappa`` is on the [-1, 1] scale (multiply by 100
    for reporting).
    """

    overall_accuracy: float
    average_accuracy: float
    kappa: float
    per_class: np.ndarray
    excluded_classes: list[int] = field(default_factory=list)


class ConfusionMatrix:
    """Integer n x n counts; rows are true classes, columns predictions,
    both 1-based."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError(f"need at least 1 class, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, true_class: int, predicted_class: int) -> None:
        if not (
            1 <= true_class <= self.num_classes
            and 1 <= predicted_class <= self.num_classes
        ):
            raise ValueError(
                f"class ids must be in [1, {self.num_classes}], "
                f"got true={true_class}, predicted={predicted_class}"
            )
        self.counts[true_class - 1, predicted_class - 1] += 1

    def accumulate_many(
        self, true_classes: np.ndarray, predicted_classes: np.ndarray
    ) -> None:
        true_classes = np.asarray(true_classes, dtype=np.int64)
        predicted_classes = np.asarray(predicted_classes, dtype=np.int64)
        if true_classes.shape != predicted_classes.shape:
            raise ValueError("true and predicted arrays must have the same shape")
        for arr in (true_classes, predicted_classes):
            if len(arr) and not ((arr >= 1) & (arr <= self.num_classes)).all():
                raise ValueError(f"class ids must be in [1, {self.num_classes}]")
        np.add.at(self.counts, (true_classes - 1, predicted_classes - 1), 1)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Elementwise sum with another matrix over the same classes."""
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices over different class counts")
        merged = ConfusionMatrix(self.num_classes)
        merged.counts = self.counts + other.counts
        return merged

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def metrics(self) -> MetricsResult:
        """Derive overall/average accuracy and the agreement coefficient.

        Overall accuracy is trace / total.  Average accuracy is the mean
        per-class recall over classes that appear in the truth; empty rows
        are excluded (they contribute nothing to either the trace or the
        chance term, so the coefficient needs no special case).  The
        agreement coefficient is (p_o - p_e) / (1 - p_e) with p_e the
        marginal-product chance agreement; the degenerate p_e = 1 case (all
        mass in one cell) is defined as 1.
        """
        total = self.total
        if total == 0:
            raise ValueError("cannot compute metrics of an empty confusion matrix")
        row_sums = self.counts.sum(axis=1)
        col_sums = self.counts.sum(axis=0)
        diag = np.diag(self.counts)

        supported = row_sums > 0
        per_class = np.full(self.num_classes, np.nan)
        per_class[supported] = diag[supported] / row_sums[supported]
        excluded = [int(i) + 1 for i in np.nonzero(~supported)[0]]

        overall = float(diag.sum() / total)
        average = float(per_class[supported].mean())
        chance = float((row_sums * col_sums).sum() / (total * total))
        kappa = 1.0 if chance >= 1.0 else (overall - chance) / (1.0 - chance)
        return MetricsResult(overall, average, float(kappa), per_class, excluded)


def format_metrics_table(
    cm: ConfusionMatrix,
    result: MetricsResult | None = None,
    class_names: dict[int, str] | None = None,
) -> str:
    """Human-readable report: one line per class, then the three summaries."""
    result = result or cm.metrics()
    names = class_names or {}
    row_sums = cm.counts.sum(axis=1)
    lines = [f"{'class':>5}  {'name':<12}  {'support':>7}  {'accuracy':>8}"]
    for i in range(cm.num_classes):
        cid = i + 1
        acc = result.per_class[i]
        acc_text = f"{acc:8.4f}" if np.isfinite(acc) else "       -"
        lines.append(
            f"{cid:>5}  {names.get(cid, f'class_{cid}'):<12}  {row_sums[i]:>7}  {acc_text}"
        )
    lines.append("")
    lines.append(f"overall_accuracy  {result.overall_accuracy:.6f}")
    lines.append(f"average_accuracy  {result.average_accuracy:.6f}")
    lines.append(f"kappa_x100        {result.kappa * 100.0:.6f}")
    if result.excluded_classes:
        lines.append(
            "excluded_from_average  "
            + ",".join(str(c) for c in result.excluded_classes)
        )
    return "\n".join(lines) + "\n"


def format_metrics_kv(
    cm: ConfusionMatrix,
    result: MetricsResult | None = None,
    class_names: dict[int, str] | None = None,
) -> str:
    """Machine-readable ``key = value`` report with full float precision."""
    result = result or cm.metrics()
    names = class_names or {}
    lines = []
    for i in range(cm.num_classes):
        cid = i + 1
        lines.append(f"class_{cid}_name = {names.get(cid, f'class_{cid}')}")
        acc = result.per_class[i]
        lines.append(f"class_{cid}_accuracy = {acc!r}")
    lines.append(f"oa = {result.overall_accuracy!r}")
    lines.append(f"aa = {result.average_accuracy!r}")
    lines.append(f"kappa_x100 = {result.kappa * 100.0!r}")
    return "\n".join(lines) + "\n"
