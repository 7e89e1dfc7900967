"""Pose-ranking and screening metrics, plus the scores file format.

Scores travel as ScoredExample records: a predicted score with whatever
ground truth is known (binary label, pose RMSD, pose rank within a docking
run). Metrics validate that the fields they need are present instead of
guessing.

The ROC AUC here is exact, not trapezoid-approximate-in-float: tied scores
are collapsed into single ROC vertices and the area is accumulated from
integer true/false positive counts, so it equals the pairwise statistic
P(score_pos > score_neg) + 0.5 P(tie) without float drift.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import FormatError


@dataclass(frozen=True)
class ScoredExample:
    score: float
    label: int
    target_id: str = ""
    ligand_id: str = ""
    pose_rank: int | None = None
    rmsd: float | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if not np.isfinite(self.score):
            raise ValueError(f"score must be finite, got {self.score}")
        if self.rmsd is not None and self.rmsd < 0:
            raise ValueError(f"rmsd must be nonnegative, got {self.rmsd}")


@dataclass(frozen=True)
class RocCurve:
    """ROC vertices including (0, 0) and (1, 1), one per distinct score."""

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray | None = None


def roc_auc(examples) -> tuple[RocCurve, float]:
    """ROC curve and exact AUC for a set of scored binary examples.

    Requires at least one example of each class. Ties in score form single
    curve vertices; the returned AUC equals the pairwise estimator
    (#(pos > neg) + 0.5 #(pos == neg)) / (P * N) exactly.
    """
    examples = list(examples)
    scores = np.array([e.score for e in examples], dtype=np.float64)
    labels = np.array([e.label for e in examples], dtype=np.int64)
    if scores.size == 0:
        raise ValueError("no examples")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"need both classes, got {n_pos} positive / {n_neg} negative")

    order = np.argsort(-scores, kind="stable")
    scores = scores[order]
    labels = labels[order]
    # Group ties: boundaries where the score changes.
    boundary = np.nonzero(np.diff(scores))[0]
    ends = np.concatenate([boundary + 1, [scores.size]])
    tp_cum = np.cumsum(labels)[ends - 1]
    fp_cum = np.cumsum(1 - labels)[ends - 1]

    tps = np.concatenate([[0], tp_cum])
    fps = np.concatenate([[0], fp_cum])
    # Twice the area under the integer-count curve, exact in int64.
    acc = int(np.sum((fps[1:] - fps[:-1]) * (tps[1:] + tps[:-1])))
    auc = acc / (2.0 * n_pos * n_neg)
    curve = RocCurve(
        fpr=fps / float(n_neg),
        tpr=tps / float(n_pos),
        thresholds=np.concatenate([[np.inf], scores[ends - 1]]),
    )
    return curve, auc


def _ordered_by_score(examples):
    scores = np.array([e.score for e in examples], dtype=np.float64)
    return [examples[i] for i in np.argsort(-scores, kind="stable")]


def intra_target_topn(groups, n: int) -> float:
    """Fraction of targets whose top-n poses by score include a good pose.

    `groups` maps target id to that target's scored poses; every pose needs
    an RMSD. A pose is good when its RMSD is below 2 angstroms.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not groups:
        raise ValueError("no targets")
    hits = 0
    for target, poses in groups.items():
        poses = list(poses)
        if not poses:
            raise ValueError(f"target {target!r} has no poses")
        for p in poses:
            if p.rmsd is None:
                raise ValueError(f"target {target!r} has a pose without rmsd")
        best = _ordered_by_score(poses)[:n]
        if any(p.rmsd < 2.0 for p in best):
            hits += 1
    return hits / len(groups)


def random_baseline(groups, n: int, trials: int = 2000,
                    rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Mean and standard deviation of the top-n success fraction when poses
    are ordered uniformly at random, estimated over `trials` shuffles."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not groups:
        raise ValueError("no targets")
    if rng is None:
        rng = np.random.default_rng()
    good_masks = []
    for target, poses in groups.items():
        poses = list(poses)
        if not poses:
            raise ValueError(f"target {target!r} has no poses")
        for p in poses:
            if p.rmsd is None:
                raise ValueError(f"target {target!r} has a pose without rmsd")
        good_masks.append(np.array([p.rmsd < 2.0 for p in poses], dtype=bool))
    fractions = np.empty(trials, dtype=np.float64)
    for t in range(trials):
        hits = 0
        for mask in good_masks:
            picked = rng.permutation(mask.size)[:n]
            if mask[picked].any():
                hits += 1
        fractions[t] = hits / len(good_masks)
    return float(fractions.mean()), float(fractions.std())


def pool_ligand_scores(groups, mode: str) -> dict[str, ScoredExample]:
    """Collapse per-pose scores to one score per ligand.

    "single" keeps the pose with pose_rank 1 (every ligand must have one);
    "multi" keeps each ligand's maximum score.
    """
    if mode not in ("single", "multi"):
        raise ValueError(f"mode must be 'single' or 'multi', got {mode!r}")
    if not groups:
        raise ValueError("no ligands")
    pooled: dict[str, ScoredExample] = {}
    for ligand, poses in groups.items():
        poses = list(poses)
        if not poses:
            raise ValueError(f"ligand {ligand!r} has no poses")
        if mode == "single":
            first = [p for p in poses if p.pose_rank == 1]
            if not first:
                raise ValueError(f"ligand {ligand!r} has no pose with rank 1")
            pooled[ligand] = first[0]
        else:
            best = max(poses, key=lambda p: p.score)
            pooled[ligand] = best
    return pooled


def pearson(x, y) -> float:
    """Pearson correlation of two equally sized samples."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"need two 1-d arrays of equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValueError("correlation needs at least two points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("correlation inputs must be finite")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = float(np.sqrt((xc * xc).sum() * (yc * yc).sum()))
    if denom == 0.0:
        raise ValueError("correlation undefined for zero-variance input")
    return float((xc * yc).sum() / denom)


LOGIT_EPS = 1e-7


def logit(p):
    """log(p / (1 - p)) with inputs clamped into [1e-7, 1 - 1e-7]."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    clamped = np.clip(p, LOGIT_EPS, 1.0 - LOGIT_EPS)
    if np.any(clamped != p):
        warnings.warn("probabilities clamped before logit", RuntimeWarning)
    out = np.log(clamped / (1.0 - clamped))
    return float(out) if out.ndim == 0 else out


def group_by(examples, key) -> dict[str, list[ScoredExample]]:
    """Group examples by an attribute name, preserving first-seen order."""
    groups: dict[str, list[ScoredExample]] = {}
    for e in examples:
        groups.setdefault(getattr(e, key), []).append(e)
    return groups


def _fmt_opt(value, fmt="{}"):
    return "-" if value is None else fmt.format(value)


def format_scores(examples) -> str:
    """Serialize examples as the tab-separated scores table."""
    lines = ["\t".join(["target_id", "ligand_id", "pose_rank", "rmsd", "label", "score"])]
    for e in examples:
        lines.append(
            "\t".join(
                [
                    e.target_id or "-",
                    e.ligand_id or "-",
                    _fmt_opt(e.pose_rank),
                    _fmt_opt(e.rmsd, "{:.4f}"),
                    str(e.label),
                    f"{e.score:.17g}",
                ]
            )
        )
    return "\n".join(lines) + "\n"


def parse_scores(text: str) -> list[ScoredExample]:
    """Inverse of format_scores; the header line is optional."""
    out: list[ScoredExample] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t") if "\t" in line else line.split()
        if fields[0] == "target_id":
            continue
        if len(fields) != 6:
            raise FormatError(f"line {lineno}: expected 6 fields, got {len(fields)}")
        target, ligand, rank, rmsd, label, score = fields
        try:
            out.append(
                ScoredExample(
                    score=float(score),
                    label=int(label),
                    target_id="" if target == "-" else target,
                    ligand_id="" if ligand == "-" else ligand,
                    pose_rank=None if rank == "-" else int(rank),
                    rmsd=None if rmsd == "-" else float(rmsd),
                )
            )
        except (ValueError, TypeError) as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
    if not out:
        raise FormatError("scores file contains no examples")
    return out


@dataclass
class EvalReport:
    """Everything the evaluate command prints, as plain data."""

    n_examples: int
    auc: float
    curve: RocCurve
    per_target_auc: dict[str, float]
    topn: dict[int, float]
    topn_baseline: dict[int, tuple[float, float]]
    pooled_auc: dict[str, float]
    score_rmsd_pearson: float | None


def summarize(examples, *, topn=(1, 3, 5), trials: int = 2000,
              rng: np.random.Generator | None = None) -> EvalReport:
    """Compute the full metric report for a set of scored examples.

    Pose metrics (top-n, baselines, score/RMSD correlation) appear only when
    every example carries an RMSD; pooled screening AUCs only when ligand
    ids and pose ranks allow it. Metrics that need both classes are skipped
    per group when a group is single-class.
    """
    examples = list(examples)
    curve, auc = roc_auc(examples)

    per_target: dict[str, float] = {}
    by_target = group_by(examples, "target_id")
    for target, poses in by_target.items():
        labels = {p.label for p in poses}
        if labels == {0, 1}:
            per_target[target] = roc_auc(poses)[1]

    have_rmsd = all(e.rmsd is not None for e in examples)
    topn_frac: dict[int, float] = {}
    topn_base: dict[int, tuple[float, float]] = {}
    pearson_r: float | None = None
    if have_rmsd and by_target:
        for n in topn:
            topn_frac[n] = intra_target_topn(by_target, n)
            topn_base[n] = random_baseline(by_target, n, trials=trials, rng=rng)
        scores = np.array([e.score for e in examples])
        rmsds = np.array([e.rmsd for e in examples])
        if scores.size >= 2 and np.unique(scores).size > 1 and np.unique(rmsds).size > 1:
            pearson_r = pearson(logit(scores), rmsds)

    pooled: dict[str, float] = {}
    by_ligand = group_by(examples, "ligand_id")
    if all(e.ligand_id for e in examples):
        for mode in ("single", "multi"):
            if mode == "single" and not all(
                any(p.pose_rank == 1 for p in poses) for poses in by_ligand.values()
            ):
                continue
            collapsed = list(pool_ligand_scores(by_ligand, mode).values())
            labels = {e.label for e in collapsed}
            if labels == {0, 1}:
                pooled[mode] = roc_auc(collapsed)[1]

    return EvalReport(
        n_examples=len(examples),
        auc=auc,
        curve=curve,
        per_target_auc=per_target,
        topn=topn_frac,
        topn_baseline=topn_base,
        pooled_auc=pooled,
        score_rmsd_pearson=pearson_r,
    )


def format_report(report: EvalReport) -> str:
    lines = [
        f"examples\t{report.n_examples}",
        f"auc\t{report.auc:.6f}",
    ]
    for target in sorted(report.per_target_auc):
        lines.append(f"target_auc\t{target}\t{report.per_target_auc[target]:.6f}")
    for n in sorted(report.topn):
        lines.append(f"top{n}\t{report.topn[n]:.6f}")
        mean, std = report.topn_baseline[n]
        lines.append(f"top{n}_random\t{mean:.6f}\t{std:.6f}")
    for mode in sorted(report.pooled_auc):
        lines.append(f"pooled_auc_{mode}\t{report.pooled_auc[mode]:.6f}")
    if report.score_rmsd_pearson is not None:
        lines.append(f"logit_score_rmsd_pearson\t{report.score_rmsd_pearson:.6f}")
    return "\n".join(lines) + "\n"


def rank_examples(examples) -> list[ScoredExample]:
    """Examples in descending score order; ties keep input order."""
    return _ordered_by_score(list(examples))
