"""Warmup, training refinement and test-time update over one few-shot split."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Sequence

from .agents import GeneratorOutput, Roles, TaskContext, retrieve_contrast_pair
from .bank import TAU_PROMOTE, TAU_REMOVE, BankOperation, KnowledgeBank, tau_drop_for
from .data import FewShotSplit, TimeSeriesSample
from .errors import ConfigError, MissingClass, RoleFailure
from .features import StatsSummary, rank_features, summarize

log = logging.getLogger(__name__)

FAILED = "__failed__"


@dataclass
class RunConfig:
    k: int = 3
    seed: int = 0
    tau_drop: int | None = None  # None: ten percent of the training steps, rounded up
    tau_promote: int = TAU_PROMOTE
    tau_remove: int = TAU_REMOVE
    top_n: int = 3
    enrich_inter: bool = False
    epochs: int = 1

    def __post_init__(self):
        if not self.tau_remove < 0 < self.tau_promote:
            raise ConfigError("thresholds must satisfy tau_remove < 0 < tau_promote")
        if self.k < 1 or self.top_n < 1 or self.epochs < 1:
            raise ConfigError("k, top_n and epochs must be positive")


@dataclass
class StepRecord:
    phase: str
    step: int
    sample_id: str | None = None
    truth: str | None = None
    pass1: str | None = None
    pass2: str | None = None
    final: str | None = None
    reflection: dict | None = None
    contrast: list | None = None
    ops: list = field(default_factory=list)
    promoted: list = field(default_factory=list)
    demoted: list = field(default_factory=list)
    removed: list = field(default_factory=list)
    purged: list = field(default_factory=list)
    degraded: bool = False
    errors: list = field(default_factory=list)
    token_count: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsReport:
    n: int
    correct: int
    accuracy: float
    per_class: dict
    confusion: dict
    degraded_count: int = 0
    role_failure_count: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


def compute_metrics(truths: Sequence[str], preds: Sequence[str | None], label_set: Sequence[str], degraded=0, failures=0):
    """Accuracy, per-class precision/recall and a confusion matrix.

    Predictions of None (no parseable answer) land in the FAILED column and
    count as errors.
    """
    labels = list(label_set)
    columns = labels + [FAILED]
    confusion = {t: {c: 0 for c in columns} for t in labels}
    for t, p in zip(truths, preds):
        row = confusion.setdefault(t, {c: 0 for c in columns})
        row[p if p in row else FAILED] += 1
    correct = sum(confusion[l][l] for l in labels)
    n = len(truths)
    per_class = {}
    for l in labels:
        predicted = sum(confusion[t][l] for t in confusion)
        support = sum(confusion[l].values())
        per_class[l] = {
            "precision": confusion[l][l] / predicted if predicted else 0.0,
            "recall": confusion[l][l] / support if support else 0.0,
            "support": support,
        }
    return MetricsReport(n, correct, correct / n if n else 0.0, per_class, confusion, degraded, failures)


class RunDir:
    """Layout: config.json, bank_step_<n>.json, steps.jsonl, metrics.json, images/."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        for name in ("steps.jsonl", "transcript.jsonl"):
            (self.path / name).write_text("", encoding="utf-8")

    @property
    def images(self) -> Path:
        return self.path / "images"

    @property
    def transcript(self) -> Path:
        return self.path / "transcript.jsonl"

    def write_config(self, doc: dict):
        (self.path / "config.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    def write_bank(self, step: int, bank: KnowledgeBank):
        (self.path / f"bank_step_{step}.json").write_text(bank.snapshot(), encoding="utf-8")

    def append_step(self, record: StepRecord):
        with open(self.path / "steps.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")

    def write_metrics(self, metrics: MetricsReport):
        (self.path / "metrics.json").write_text(metrics.to_json(), encoding="utf-8")


def latest_snapshot(run_dir) -> Path:
    snaps = sorted(Path(run_dir).glob("bank_step_*.json"), key=lambda p: int(p.stem.rsplit("_", 1)[1]))
    if not snaps:
        raise FileNotFoundError(f"no bank snapshots in {run_dir}")
    return snaps[-1]


def _profile(label: str, summaries: Sequence[StatsSummary]) -> str:
    """One-line statistical profile of a class from its samples' summaries."""
    feats = [s.features() for s in summaries]
    names = sorted(set.intersection(*(set(f) for f in feats)))
    by_channel: dict = {}
    for name in names:
        ch, stat = name.split(".", 1)
        vals = [f[name] for f in feats]
        lo, hi = min(vals), max(vals)
        mean = sum(vals) / len(vals)
        by_channel.setdefault(ch, []).append(f"{stat} {mean:.4g} (range {lo:.4g}..{hi:.4g})")
    body = "; ".join(f"{ch}: " + ", ".join(items) for ch, items in by_channel.items())
    return f"Class {label!r} statistical profile over {len(summaries)} labeled samples. {body}."


class Pipeline:
    def __init__(self, roles: Roles, ctx: TaskContext, split: FewShotSplit, config: RunConfig | None = None, run_dir=None):
        self.roles = roles
        self.ctx = ctx
        self.split = split
        self.config = config or RunConfig(k=split.k, seed=split.seed)
        self.run_dir = RunDir(run_dir) if run_dir is not None and not isinstance(run_dir, RunDir) else run_dir
        self.records: list[StepRecord] = []
        self.next_step = 0

    # -- helpers ----------------------------------------------------------

    def _begin(self, bank: KnowledgeBank, phase: str, sample=None, truth=None) -> tuple[StepRecord, int]:
        step = self.next_step
        self.next_step += 1
        bank.step = step
        if bank.phase != phase:
            bank.set_phase(phase, step=step)
        rec = StepRecord(phase, step, sample.sample_id if sample is not None else None, truth)
        return rec, len(bank.op_log)

    def _finish(self, bank: KnowledgeBank, rec: StepRecord, log_start: int, snapshot=True):
        rec.ops = bank.op_log[log_start:]
        rec.token_count = bank.token_count()
        self.records.append(rec)
        if self.run_dir is not None:
            if snapshot:
                self.run_dir.write_bank(rec.step, bank)
            self.run_dir.append_step(rec)

    def resume_from(self, bank: KnowledgeBank):
        steps = [e["step"] for e in bank.op_log if isinstance(e.get("step"), int)]
        self.next_step = max(steps, default=-1) + 1

    # -- warmup -----------------------------------------------------------

    def warmup(self, bank: KnowledgeBank | None = None) -> KnowledgeBank:
        bank = bank or KnowledgeBank()
        if len(bank) or bank.phase != "warmup":
            raise ConfigError("warmup needs an empty bank in the warmup phase")
        rec, start = self._begin(bank, "warmup")
        ctx = self.ctx
        background = f"Dataset {ctx.dataset_name}: {ctx.dataset_description}".rstrip(": ")
        bank.apply([BankOperation.add("background", background)])

        groups = {label: [s for s in self.split.train if s.label == label] for label in ctx.label_set}
        summaries = {label: [summarize(s) for s in members] for label, members in groups.items() if members}

        for label, members in groups.items():
            if not members:
                continue
            bank.apply([BankOperation.add("intra_class", _profile(label, summaries[label]), class_scope=label)])
            try:
                descriptors = self.roles.describe_class(bank, ctx, label, members)
            except RoleFailure as exc:
                log.warning("warmup: class %r description failed, statistics only: %s", label, exc)
                rec.errors.append(f"warmup.intra {label}: {exc}")
                rec.degraded = True
                continue
            bank.apply(
                [BankOperation.add("intra_class", f"Class {label!r}: {d}", class_scope=label) for d in descriptors]
            )

        labels = [l for l in ctx.label_set if l in summaries]
        for a, b in combinations(labels, 2):
            report = rank_features(summaries, (a, b), self.config.top_n)
            lines = report.describe()
            bank.apply([BankOperation.add("inter_class", line, class_scope=(a, b)) for line in lines])
            if self.config.enrich_inter:
                try:
                    extra = self.roles.contrast_classes(bank, ctx, a, b, "\n".join(lines), groups[a], groups[b])
                except RoleFailure as exc:
                    rec.errors.append(f"warmup.inter {a}~{b}: {exc}")
                    continue
                bank.apply(
                    [BankOperation.add("inter_class", f"{a!r} vs {b!r}: {d}", class_scope=(a, b)) for d in extra]
                )
        self._finish(bank, rec, start)
        return bank

    # -- training ---------------------------------------------------------

    def training_order(self) -> list[TimeSeriesSample]:
        rng = random.Random(self.config.seed)
        train, val = list(self.split.train), list(self.split.val)
        rng.shuffle(train)
        rng.shuffle(val)
        return train + val

    def tau_drop(self) -> int:
        if self.config.tau_drop is not None:
            return self.config.tau_drop
        return tau_drop_for(len(self.split.train) + len(self.split.val))

    def train(self, bank: KnowledgeBank) -> KnowledgeBank:
        order = self.training_order() * self.config.epochs
        pool = self.split.pool
        tau_drop = self.tau_drop()
        for i, sample in enumerate(order):
            rec, start = self._begin(bank, "train", sample, sample.label)
            try:
                self._train_sample(sample, bank, rec, [s for s in pool if s.sample_id != sample.sample_id])
            except RoleFailure as exc:
                log.warning("train step %d (%s) aborted: %s", rec.step, sample.sample_id, exc)
                rec.errors.append(str(exc))
            if i == len(order) - 1:
                rec.purged = bank.discard_sweep(tau_drop)
            self._finish(bank, rec, start)
        return bank

    def _train_sample(self, sample, bank, rec, pool):
        truth = sample.label
        gen = self.roles.generate_first_pass(sample, bank, self.ctx)
        rec.pass1 = rec.final = gen.final_answer
        if gen.final_answer == truth:
            refl = self.roles.reflect_correct(sample, bank, self.ctx, gen, truth)
        else:
            try:
                contrast = retrieve_contrast_pair(sample, gen.final_answer, truth, pool)
            except MissingClass as exc:
                raise RoleFailure(f"contrast retrieval failed: {exc}") from exc
            rec.contrast = [contrast.hard_positive.sample_id, contrast.hard_negative.sample_id]
            refl = self.roles.reflect_incorrect(sample, bank, self.ctx, gen, truth, contrast)
        rec.reflection = refl.summary()
        bank.record_tags(refl.tag_pairs())
        mod = self.roles.curate(bank, self.ctx, gen, refl, sample, truth)
        if mod.failed:
            rec.errors.append("modifier: no usable reply")
        bank.apply(mod.operations)

    # -- testing ----------------------------------------------------------

    def test_step(self, sample, bank: KnowledgeBank, update: bool = True, two_pass: bool = True):
        """Classify one streaming test sample; returns (final label or None, StepRecord)."""
        rec, start = self._begin(bank, "test", sample, sample.label)
        final = self._test_sample(sample, bank, rec, update, two_pass)
        self._finish(bank, rec, start)
        return final, rec

    def _test_sample(self, sample, bank, rec, update, two_pass):
        try:
            first = self.roles.generate_first_pass(sample, bank, self.ctx)
        except RoleFailure as exc:
            rec.errors.append(str(exc))
            return None
        rec.pass1 = first.final_answer
        second = self.roles.generate_second_pass(sample, bank, self.ctx, first) if two_pass else first
        rec.pass2 = second.final_answer if two_pass else None
        rec.final = second.final_answer
        rec.degraded = second.degraded
        if not update or second.degraded:
            # a failed re-check gives no trustworthy pseudo-label to refine on
            return rec.final
        try:
            self._refine(sample, bank, rec, first, second)
        except RoleFailure as exc:
            log.warning("test step %d refinement aborted: %s", rec.step, exc)
            rec.errors.append(str(exc))
        return rec.final

    def _refine(self, sample, bank, rec, first: GeneratorOutput, second: GeneratorOutput):
        y1, pseudo = first.final_answer, second.final_answer
        if y1 != pseudo:
            # negative instance for y1: diagnose the first pass against the pseudo-label
            try:
                contrast = retrieve_contrast_pair(sample, y1, pseudo, self.split.pool)
            except MissingClass as exc:
                raise RoleFailure(f"contrast retrieval failed: {exc}") from exc
            rec.contrast = [contrast.hard_positive.sample_id, contrast.hard_negative.sample_id]
            judged = first
            refl = self.roles.reflect_incorrect(sample, bank, self.ctx, first, pseudo, contrast)
        else:
            judged = second
            refl = self.roles.reflect_correct(sample, bank, self.ctx, second, pseudo)
        rec.reflection = refl.summary()
        bank.record_tags(refl.tag_pairs())
        mod = self.roles.curate(bank, self.ctx, judged, refl, sample, pseudo)
        if mod.failed:
            rec.errors.append("modifier: no usable reply")
        entries = bank.apply(mod.operations)
        created = {e["id"] for e in entries if e["accepted"] and e["op"]["kind"] == "ADD"}
        observed = set(second.bullet_ids) | {t.id for t in refl.bullet_tags if t.tag == "helpful"} | created
        upd = bank.update_candidate_scores(
            pseudo, observed, refl.tag_pairs(), self.config.tau_promote, self.config.tau_remove
        )
        rec.promoted, rec.demoted, rec.removed = list(upd.promoted), list(upd.demoted), list(upd.removed)

    def _metrics(self, records: Sequence[StepRecord]) -> MetricsReport:
        return compute_metrics(
            [r.truth for r in records],
            [r.final for r in records],
            self.ctx.label_set,
            degraded=sum(r.degraded for r in records),
            failures=sum(1 for r in records if r.errors),
        )

    def run_test(self, samples: Sequence[TimeSeriesSample], bank: KnowledgeBank, update=True, two_pass=True):
        records = [self.test_step(s, bank, update, two_pass)[1] for s in samples]
        metrics = self._metrics(records)
        if self.run_dir is not None:
            self.run_dir.write_metrics(metrics)
        return metrics, records

    def evaluate_only(self, samples: Sequence[TimeSeriesSample], bank: KnowledgeBank, two_pass=True) -> MetricsReport:
        """Two-pass (or single-pass) classification with every bank mutation disabled."""
        frozen = bank.copy()
        frozen.phase = "test"
        records = []
        for s in samples:
            step = self.next_step
            self.next_step += 1
            frozen.step = step
            rec = StepRecord("test", step, s.sample_id, s.label)
            self._test_sample(s, frozen, rec, update=False, two_pass=two_pass)
            rec.token_count = frozen.token_count()
            records.append(rec)
            self.records.append(rec)
            if self.run_dir is not None:
                self.run_dir.append_step(rec)
        metrics = self._metrics(records)
        if self.run_dir is not None:
            self.run_dir.write_metrics(metrics)
        return metrics

    def run(self, bank: KnowledgeBank | None = None):
        bank = self.warmup(bank)
        self.train(bank)
        metrics, _ = self.run_test(self.split.test, bank)
        return metrics, bank


ABLATIONS = ("full", "w/o update", "w/o 2-pass", "w/o train refine & test update")


def run_variant(variant: str, make_pipeline: Callable[[str], Pipeline]) -> MetricsReport:
    """Run one ablation variant on a freshly built pipeline (fresh client, fresh bank)."""
    pipe = make_pipeline(variant)
    bank = pipe.warmup()
    if variant == "full":
        pipe.train(bank)
        return pipe.run_test(pipe.split.test, bank)[0]
    if variant == "w/o update":
        pipe.train(bank)
        return pipe.evaluate_only(pipe.split.test, bank, two_pass=True)
    if variant == "w/o 2-pass":
        pipe.train(bank)
        return pipe.run_test(pipe.split.test, bank, update=True, two_pass=False)[0]
    if variant == "w/o train refine & test update":
        return pipe.evaluate_only(pipe.split.test, bank, two_pass=False)
    raise ConfigError(f"unknown ablation variant {variant!r}")


def ablation_table(results: dict) -> str:
    rows = ["| variant | accuracy | correct | n | degraded | role failures |", "|---|---|---|---|---|---|"]
    for name, m in results.items():
        rows.append(f"| {name} | {m.accuracy:.3f} | {m.correct} | {m.n} | {m.degraded_count} | {m.role_failure_count} |")
    return "\n".join(rows) + "\n"
