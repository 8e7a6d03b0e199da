"""Offline evaluation: ranking metrics, ablation variants, significance.

Metrics treat the gold annotation as the single relevant item (binary
relevance), which is how labeled utterance datasets arrive. Pairwise
variant comparisons use paired t-tests on per-instance top-1 correctness
with a Bonferroni-corrected significance level; the Student-t CDF is
computed from the regularized incomplete beta function (continued
fraction), so no statistical tables or external stats packages ship.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

from .clock import SYSTEM_CLOCK, Clock
from .config import AnnotationConfig
from .errors import LabelForgeError, ParseError, ValidationError
from .knowledge_base import Catalog, TrainingExample
from .pipeline import AllAgentsFailed, AnnotationEngine, EngineOptions


class EmptyDataset(LabelForgeError):
    pass


class DegenerateDifferences(LabelForgeError):
    """Zero-variance paired differences; carries the convention values.

    With no variance the t statistic is +/- infinity when the mean differs
    from zero (p = 0) and undefined when everything cancels (p = 1 by the
    symmetry convention).
    """

    def __init__(self, mean_diff: float):
        self.mean_diff = mean_diff
        self.t = math.inf if mean_diff > 0 else (-math.inf if mean_diff < 0 else 0.0)
        self.p = 0.0 if mean_diff != 0 else 1.0
        super().__init__(f"zero-variance differences (mean {mean_diff})")


# ---- instances -----------------------------------------------------------------


@dataclass(frozen=True)
class EvalInstance:
    utterance: str
    gold_id: str
    predicted: tuple[str, ...] = ()  # ranked annotation ids, best first

    def rank_of_gold(self) -> int | None:
        """1-based rank of the gold id in predictions, None if absent."""
        for i, annotation_id in enumerate(self.predicted, start=1):
            if annotation_id == self.gold_id:
                return i
        return None


MAX_EVAL_PREDICTIONS = 5


def load_eval_dataset(path: str | Path, catalog: Catalog) -> list[EvalInstance]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    instances = []
    dangling = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {line_no}: invalid JSON ({exc})") from exc
        utterance = str(obj.get("utterance", "")).strip()
        gold_id = str(obj.get("gold_id", "")).strip()
        if not utterance or not gold_id:
            raise ValidationError("utterance", f"line {line_no}: needs utterance and gold_id")
        if gold_id not in catalog.by_id:
            dangling.append(gold_id)
        instances.append(EvalInstance(utterance=utterance, gold_id=gold_id))
    if dangling:
        raise ValidationError("gold_id", f"dangling annotation ids: {sorted(set(dangling))}")
    if not instances:
        raise EmptyDataset(str(path))
    return instances


# ---- metrics -------------------------------------------------------------------


def topk_accuracy(instances: list[EvalInstance], k: int) -> float:
    if not instances:
        raise EmptyDataset("no instances")
    hits = 0
    for inst in instances:
        rank = inst.rank_of_gold()
        if rank is not None and rank <= k:
            hits += 1
    return hits / len(instances)


def mrr(instances: list[EvalInstance]) -> float:
    """Mean reciprocal rank; an absent gold contributes 0."""
    if not instances:
        raise EmptyDataset("no instances")
    total = 0.0
    for inst in instances:
        rank = inst.rank_of_gold()
        if rank is not None:
            total += 1.0 / rank
    return total / len(instances)


def ndcg_at_k(instances: list[EvalInstance], k: int) -> float:
    """NDCG@k under binary relevance with a single gold item.

    The ideal DCG is 1 (gold at rank 1), so each instance contributes
    1 / log2(rank + 1) when the gold lands within the cutoff, else 0.
    """
    if not instances:
        raise EmptyDataset("no instances")
    total = 0.0
    for inst in instances:
        rank = inst.rank_of_gold()
        if rank is not None and rank <= k:
            total += 1.0 / math.log2(rank + 1)
    return total / len(instances)


def macro_f1_top1(instances: list[EvalInstance]) -> float:
    """Macro-averaged F1 of top-1 predictions over the gold label set.

    Classes are the annotation ids that appear as golds; per-class F1 uses
    top-1 predictions as the assigned label. Classes the system never
    predicts correctly score 0 and still count, which is the point of the
    macro average.
    """
    if not instances:
        raise EmptyDataset("no instances")
    classes = sorted({inst.gold_id for inst in instances})
    scores = []
    for cls in classes:
        tp = fp = fn = 0
        for inst in instances:
            predicted = inst.predicted[0] if inst.predicted else None
            if predicted == cls and inst.gold_id == cls:
                tp += 1
            elif predicted == cls:
                fp += 1
            elif inst.gold_id == cls:
                fn += 1
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return sum(scores) / len(scores)


@dataclass(frozen=True)
class MetricsReport:
    n: int
    top1: float
    top3: float
    top5: float
    mrr: float
    ndcg3: float
    ndcg5: float
    macro_f1_top1: float
    per_band_agreement: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "top1": self.top1,
            "top3": self.top3,
            "top5": self.top5,
            "mrr": self.mrr,
            "ndcg3": self.ndcg3,
            "ndcg5": self.ndcg5,
            "macro_f1_top1": self.macro_f1_top1,
            "per_band_agreement": dict(self.per_band_agreement),
        }


def compute_report(
    instances: list[EvalInstance], bands: list[str] | None = None
) -> MetricsReport:
    if not instances:
        raise EmptyDataset("no instances")
    per_band: dict[str, float] = {}
    if bands is not None:
        if len(bands) != len(instances):
            raise ValidationError("bands", "must align with instances")
        for band in ("HIGH", "MEDIUM", "LOW"):
            members = [inst for inst, b in zip(instances, bands) if b == band]
            if members:
                per_band[band] = topk_accuracy(members, 1)
    return MetricsReport(
        n=len(instances),
        top1=topk_accuracy(instances, 1),
        top3=topk_accuracy(instances, 3),
        top5=topk_accuracy(instances, 5),
        mrr=mrr(instances),
        ndcg3=ndcg_at_k(instances, 3),
        ndcg5=ndcg_at_k(instances, 5),
        macro_f1_top1=macro_f1_top1(instances),
        per_band_agreement=per_band,
    )


# ---- Student-t significance ------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (Lentz method)."""
    max_iter = 300
    eps = 3e-16
    fpmin = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    return h  # converged enough for double precision in practice


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log(1.0 - x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, dof: int) -> float:
    """Two-sided p-value for a Student-t statistic with `dof` degrees of freedom."""
    if dof < 1:
        raise ValidationError("dof", "must be >= 1")
    if math.isinf(t):
        return 0.0
    x = dof / (dof + t * t)
    return regularized_incomplete_beta(dof / 2.0, 0.5, x)


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    dof: int
    mean_diff: float
    significant: bool
    alpha: float
    bonferroni_m: int


def paired_ttest(a: list[float], b: list[float], m_comparisons: int = 1,
                 alpha: float = 0.05) -> TTestResult:
    """Paired two-sided t-test of a vs b under Bonferroni correction.

    Uses the sample standard deviation (n - 1) of the per-instance
    differences. Zero-variance differences raise DegenerateDifferences,
    which carries the conventional t and p values.
    """
    if len(a) != len(b):
        raise ValidationError("b", "paired samples must have equal length")
    n = len(a)
    if n < 2:
        raise ValidationError("a", "need at least two pairs")
    if m_comparisons < 1:
        raise ValidationError("m_comparisons", "must be >= 1")
    diffs = [x - y for x, y in zip(a, b)]
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    if var == 0.0:
        raise DegenerateDifferences(mean)
    t = mean / math.sqrt(var / n)
    p = t_two_sided_p(t, n - 1)
    return TTestResult(
        t=t,
        p=p,
        dof=n - 1,
        mean_diff=mean,
        significant=p < alpha / m_comparisons,
        alpha=alpha,
        bonferroni_m=m_comparisons,
    )


# ---- ablation variants -------------------------------------------------------------

VARIANTS: dict[str, EngineOptions] = {
    "full": EngineOptions(),
    "no_planner": EngineOptions(use_planner=False),
    "no_judge": EngineOptions(use_judge=False),
    "four": EngineOptions(use_planner=False, use_judge=False),
    "single": EngineOptions(use_planner=False, use_judge=False,
                            agent_ids=("primary_no_emb",)),
    "no_embedding_agents": EngineOptions(agent_ids=("primary_no_emb", "full_no_emb")),
    "no_few_shot_diversity": EngineOptions(shared_few_shots=True),
}


@dataclass
class VariantOutcome:
    name: str
    report: MetricsReport
    top1_scores: list[float]  # per-instance 0/1 correctness, pairing key


@dataclass
class EvalRunResult:
    outcomes: list[VariantOutcome]
    significance: dict

    def to_dict(self) -> dict:
        return {
            "variants": {o.name: o.report.to_dict() for o in self.outcomes},
            "significance": self.significance,
        }


def run_eval(
    dataset_path: str | Path,
    variant_names: list[str],
    config: AnnotationConfig,
    catalog: Catalog,
    provider_factory,
    training: list[TrainingExample] | tuple[TrainingExample, ...] = (),
    seed: int = 0,
    clock: Clock = SYSTEM_CLOCK,
    out_dir: str | Path | None = None,
) -> EvalRunResult:
    """Run each pipeline variant over the dataset and compare them.

    `provider_factory` is called once per variant so call-count state never
    leaks between variants; with the mock provider and a fixed seed the
    whole run is deterministic. Pairwise significance uses per-instance
    top-1 correctness as the paired scores.
    """
    for name in variant_names:
        if name not in VARIANTS:
            raise ValidationError("variants", f"unknown variant {name!r}; "
                                  f"known: {', '.join(sorted(VARIANTS))}")
    instances = load_eval_dataset(dataset_path, catalog)
    outcomes: list[VariantOutcome] = []
    for name in variant_names:
        engine = AnnotationEngine(
            config=config,
            catalog=catalog,
            provider=provider_factory(),
            training=training,
            clock=clock,
            seed=seed,
            options=VARIANTS[name],
        )
        scored: list[EvalInstance] = []
        bands: list[str] = []
        try:
            for inst in instances:
                try:
                    result = engine.annotate(inst.utterance)
                    predicted = tuple(
                        c.annotation_id for c in result.judge.ranked
                    )[:MAX_EVAL_PREDICTIONS]
                    band = result.routing.band
                except AllAgentsFailed:
                    predicted = ()
                    band = "LOW"
                scored.append(replace(inst, predicted=predicted))
                bands.append(band)
        finally:
            engine.close()
        outcomes.append(
            VariantOutcome(
                name=name,
                report=compute_report(scored, bands),
                top1_scores=[
                    1.0 if inst.rank_of_gold() == 1 else 0.0 for inst in scored
                ],
            )
        )
    significance = _significance_matrix(outcomes)
    result = EvalRunResult(outcomes=outcomes, significance=significance)
    if out_dir is not None:
        _write_reports(result, Path(out_dir))
    return result


def _significance_matrix(outcomes: list[VariantOutcome]) -> dict:
    names = [o.name for o in outcomes]
    n = len(names)
    m = n * (n - 1) // 2
    t_grid = [[None] * n for _ in range(n)]
    p_grid = [[None] * n for _ in range(n)]
    sig_grid = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            try:
                res = paired_ttest(
                    outcomes[i].top1_scores, outcomes[j].top1_scores,
                    m_comparisons=max(m, 1),
                )
                t, p, sig = res.t, res.p, res.significant
            except DegenerateDifferences as deg:
                t, p = deg.t, deg.p
                sig = p < 0.05 / max(m, 1)
            t_grid[i][j] = t_grid[j][i] = None if math.isinf(t) else t
            p_grid[i][j] = p_grid[j][i] = p
            sig_grid[i][j] = sig_grid[j][i] = sig
    return {
        "metric": "top1",
        "variants": names,
        "alpha": 0.05,
        "bonferroni_m": max(m, 1),
        "threshold": 0.05 / max(m, 1),
        "t": t_grid,
        "p": p_grid,
        "significant": sig_grid,
    }


def format_report_table(result: EvalRunResult) -> str:
    headers = ["variant", "n", "top1", "top3", "top5", "mrr", "ndcg3", "ndcg5", "macroF1"]
    rows = [headers]
    for outcome in result.outcomes:
        r = outcome.report
        rows.append(
            [
                outcome.name,
                str(r.n),
                f"{r.top1:.4f}",
                f"{r.top3:.4f}",
                f"{r.top5:.4f}",
                f"{r.mrr:.4f}",
                f"{r.ndcg3:.4f}",
                f"{r.ndcg5:.4f}",
                f"{r.macro_f1_top1:.4f}",
            ]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(headers))]
    lines = []
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    return "\n".join(lines)


def _write_reports(result: EvalRunResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(
        json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (out_dir / "report.txt").write_text(format_report_table(result) + "\n", encoding="utf-8")
    (out_dir / "significance.json").write_text(
        json.dumps(result.significance, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
