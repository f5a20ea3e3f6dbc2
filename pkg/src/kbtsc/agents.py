"""Generator, Reflector and Modifier roles: prompt construction plus schema-checked parsing."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .bank import SECTIONS, BankOperation, KnowledgeBank, normalize_section, normalize_tag
from .data import TimeSeriesSample, natural_key, z_normalize
from .errors import MalformedOperation, MissingClass, RoleFailure, SchemaError
from .features import summarize
from .plotting import ImageCache, PlotConfig
from .vlm_client import DEFAULT_R_SCHEMA, DEFAULT_TEMPERATURE, ImagePart, VlmClient, VlmRequest, call_with_repair

log = logging.getLogger(__name__)

GENERATOR_KEYS = ("reasoning", "bullet_ids", "final_answer")
CORRECT_KEYS = ("reasoning", "key_insight", "advice", "bullet_tags")
INCORRECT_KEYS = ("error_identification", "root_cause_analysis", "correct_reasoning", "key_insight", "bullet_tags")
MODIFIER_KEYS = ("reasoning", "operations")
DESCRIPTOR_KEYS = ("descriptors",)

IMAGE_SLOTS = ("query_image", "predict_label_image", "truth_label_image")
_SLOT = re.compile(r"\{([a-z_]+)\}")


# --------------------------------------------------------------------------
# templates


class PromptTemplates:
    """Loads role templates from a directory (the packaged set by default)."""

    NAMES = (
        "generator_pass1",
        "generator_pass2",
        "reflector_correct",
        "reflector_incorrect",
        "modifier",
        "warmup_intra",
        "warmup_inter",
    )

    def __init__(self, directory: str | Path | None = None):
        self.texts = {}
        for name in self.NAMES:
            if directory is not None and (Path(directory) / f"{name}.txt").exists():
                self.texts[name] = (Path(directory) / f"{name}.txt").read_text(encoding="utf-8")
            else:
                self.texts[name] = resources.files("kbtsc.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")

    def slots(self, name: str) -> list[str]:
        return _SLOT.findall(self.texts[name])

    def render(self, name: str, **values) -> list:
        """Substitute every slot; returns prompt parts (str and ImagePart) in order.

        A slot value may be text, an ImagePart, or a list mixing both.
        """
        text = self.texts[name]
        parts: list = []
        pos = 0
        missing = [s for s in self.slots(name) if s not in values]
        if missing:
            raise KeyError(f"template {name} needs values for {missing}")
        for m in _SLOT.finditer(text):
            parts.append(text[pos : m.start()])
            value = values[m.group(1)]
            parts.extend(value if isinstance(value, list) else [value])
            pos = m.end()
        parts.append(text[pos:])
        merged: list = []
        for p in parts:
            if isinstance(p, str):
                if merged and isinstance(merged[-1], str):
                    merged[-1] += p
                elif p:
                    merged.append(p)
            else:
                merged.append(p)
        return merged


# --------------------------------------------------------------------------
# value types


@dataclass(frozen=True)
class TaskContext:
    dataset_name: str
    dataset_description: str
    label_set: tuple
    length: int
    n_channels: int

    @classmethod
    def from_dataset(cls, dataset) -> "TaskContext":
        _, m, w = dataset.shape
        return cls(dataset.name, dataset.description, tuple(dataset.label_set), w, m)

    def dataset_information(self) -> str:
        labels = ", ".join(repr(l) for l in self.label_set)
        return (
            f"- Dataset name: {self.dataset_name}\n"
            f"- Description: {self.dataset_description or '(none provided)'}\n"
            f"- Number of classes: {len(self.label_set)}\n"
            f"- Class labels: {labels}\n"
            f"- Sequence length: {self.length}\n"
            f"- Number of channels: {self.n_channels}"
        )


@dataclass(frozen=True)
class GeneratorOutput:
    reasoning: str
    bullet_ids: tuple
    final_answer: str
    degraded: bool = False
    dropped_ids: tuple = ()

    def to_prompt_dict(self) -> dict:
        return {"reasoning": self.reasoning, "bullet_ids": list(self.bullet_ids), "final_answer": self.final_answer}

    def render(self) -> str:
        return json.dumps(self.to_prompt_dict(), ensure_ascii=False, indent=1)


@dataclass(frozen=True)
class BulletTag:
    id: int
    tag: str
    reason: str = ""


@dataclass(frozen=True)
class ReflectionOutput:
    kind: str  # "correct" or "incorrect"
    key_insight: str
    bullet_tags: tuple
    reasoning: str = ""
    advice: str = ""
    error_identification: str = ""
    root_cause_analysis: str = ""
    correct_reasoning: str = ""

    def to_dict(self) -> dict:
        keys = CORRECT_KEYS if self.kind == "correct" else INCORRECT_KEYS
        d = {k: getattr(self, k) for k in keys if k != "bullet_tags"}
        d["bullet_tags"] = [{"id": t.id, "tag": t.tag, "reason": t.reason} for t in self.bullet_tags]
        return d

    def render(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=1)

    def tag_pairs(self) -> list[tuple]:
        return [(t.id, t.tag) for t in self.bullet_tags]

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "key_insight": self.key_insight,
            "tags": [[t.id, t.tag] for t in self.bullet_tags],
        }


@dataclass(frozen=True)
class ModifierOutput:
    reasoning: str
    operations: tuple
    dropped: tuple = ()
    failed: bool = False


@dataclass(frozen=True)
class ContrastPair:
    hard_positive: TimeSeriesSample
    hard_negative: TimeSeriesSample


# --------------------------------------------------------------------------
# parsing helpers


def _as_int(value):
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        m = re.fullmatch(r"\s*\[?\s*(?:id\s*[:=]?\s*)?(-?\d+)\s*\]?\s*", value, re.IGNORECASE)
        if m:
            return int(m.group(1))
    return None


def normalize_label(value, label_set: Sequence[str]) -> str | None:
    if value is None or isinstance(value, (dict, list)):
        return None
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    text = str(value).strip().strip("'\"`").strip()
    return text if text in label_set else None


def _text(doc: dict, key: str) -> str:
    value = doc[key]
    if value is None:
        return ""
    if isinstance(value, (dict, list)):
        return json.dumps(value, ensure_ascii=False)
    return str(value)


def parse_bullet_tags(value) -> tuple:
    if not isinstance(value, list):
        raise SchemaError("bullet_tags", "bullet_tags must be a list")
    tags = []
    for item in value:
        if not isinstance(item, dict):
            raise SchemaError("bullet_tags", "each bullet tag must be an object")
        bid = _as_int(item.get("id"))
        tag = normalize_tag(item.get("tag", ""))
        if bid is None:
            raise SchemaError("bullet_tags", f"bullet tag id {item.get('id')!r} is not an integer")
        if tag is None:
            raise SchemaError("bullet_tags", f"tag {item.get('tag')!r} must be helpful, harmful or neutral")
        tags.append(BulletTag(bid, tag, str(item.get("reason", ""))))
    return tuple(tags)


def parse_operation(item, scope_label: str | None) -> BankOperation:
    if not isinstance(item, dict):
        raise MalformedOperation("operation must be an object")
    kind = item.get("type", item.get("kind", item.get("operation", item.get("action"))))
    kind = str(kind or "").strip().upper()
    if kind == "ADD":
        section = normalize_section(item.get("section"))
        if section is None:
            raise MalformedOperation(f"unknown section {item.get('section')!r}")
        return BankOperation.add(section, item.get("content"), class_scope=scope_label)
    target = _as_int(item.get("target_id", item.get("id")))
    if kind == "MODIFY":
        if target is None:
            raise MalformedOperation("MODIFY without target_id")
        return BankOperation.modify(target, item.get("content"))
    if kind == "DELETE":
        if target is None:
            raise MalformedOperation("DELETE without target_id")
        return BankOperation.delete(target)
    raise MalformedOperation(f"unknown operation kind {kind!r}")


# --------------------------------------------------------------------------
# contrast retrieval


def _distance(a: np.ndarray, b: np.ndarray) -> float:
    w = min(a.shape[1], b.shape[1])
    m = min(a.shape[0], b.shape[0])
    return float(np.sqrt(np.sum((a[:m, :w] - b[:m, :w]) ** 2)))


def nearest(query: TimeSeriesSample, candidates: Sequence[TimeSeriesSample]) -> TimeSeriesSample:
    """Closest candidate by z-normalized Euclidean distance; ties go to the smallest sample_id."""
    qz = z_normalize(query).values
    scored = [(_distance(qz, z_normalize(c).values), c) for c in candidates]
    best = min(d for d, _ in scored)
    tied = [c for d, c in scored if d - best <= 1e-12]
    return min(tied, key=lambda c: natural_key(c.sample_id))


def retrieve_contrast_pair(query, predicted: str, truth: str, pool: Sequence[TimeSeriesSample]) -> ContrastPair:
    pos = [s for s in pool if s.label == truth]
    neg = [s for s in pool if s.label == predicted]
    if not pos:
        raise MissingClass(f"pool has no sample of class {truth!r}")
    if not neg:
        raise MissingClass(f"pool has no sample of class {predicted!r}")
    return ContrastPair(nearest(query, pos), nearest(query, neg))


# --------------------------------------------------------------------------
# roles


def execution_details(gen: GeneratorOutput, truth: str) -> str:
    return f"Truth label: {truth}\nGenerator output:\n{gen.render()}"


class Roles:
    """Stateless prompt builders over one transport; all state lives in the bank."""

    def __init__(
        self,
        client: VlmClient,
        templates: PromptTemplates | None = None,
        plot_config: PlotConfig | None = None,
        images: ImageCache | None = None,
        temperature: float = DEFAULT_TEMPERATURE,
        r_schema: int = DEFAULT_R_SCHEMA,
        max_output: dict | None = None,
    ):
        self.client = client
        self.templates = templates or PromptTemplates()
        self.plot_config = plot_config or PlotConfig()
        self.images = images or ImageCache()
        self.temperature = temperature
        self.r_schema = r_schema
        self.max_output = max_output or {}

    # -- plumbing ---------------------------------------------------------

    def image(self, sample) -> ImagePart:
        return ImagePart(self.images.get(sample, self.plot_config))

    def _request(self, template: str, role: str, bank: KnowledgeBank, tag_extra: str | None = None, **slots) -> VlmRequest:
        parts = self.templates.render(template, **slots)
        tag = f"{role}/{bank.phase}/{bank.step}" + (f"/{tag_extra}" if tag_extra else "")
        return VlmRequest(
            parts=parts,
            request_tag=tag,
            temperature=self.temperature,
            max_output=self.max_output.get(role, 4096),
        )

    def _common(self, query, bank, ctx, include_candidates=False) -> dict:
        return {
            "dataset_information": ctx.dataset_information(),
            "query_stats": summarize(query).render(),
            "knowledge_bank": bank.render_context(include_candidates=include_candidates).rstrip("\n"),
            "query_image": self.image(query),
        }

    # -- generator --------------------------------------------------------

    def _generate(self, request: VlmRequest, bank: KnowledgeBank, ctx: TaskContext) -> GeneratorOutput:
        doc = call_with_repair(self.client, request, GENERATOR_KEYS, self.r_schema)
        label = normalize_label(doc["final_answer"], ctx.label_set)
        if label is None:
            valid = ", ".join(repr(l) for l in ctx.label_set)
            fix = request.with_text(
                f"\n\nYour final_answer {doc['final_answer']!r} is not one of the valid labels. "
                f"final_answer must be exactly one of: {valid}. Reply with JSON only.",
                "label_repair",
            )
            doc = call_with_repair(self.client, fix, GENERATOR_KEYS, self.r_schema)
            label = normalize_label(doc["final_answer"], ctx.label_set)
            if label is None:
                raise RoleFailure(f"{request.request_tag}: final_answer {doc['final_answer']!r} not in label set")
        raw_ids = doc["bullet_ids"] if isinstance(doc["bullet_ids"], list) else [doc["bullet_ids"]]
        visible = bank.rendered_ids()
        kept, dropped = [], []
        for r in raw_ids:
            bid = _as_int(r)
            if bid is not None and bid in visible:
                if bid not in kept:
                    kept.append(bid)
            else:
                dropped.append(r)
        if dropped:
            log.warning("%s: dropped cited ids not in the rendered bank: %s", request.request_tag, dropped)
        return GeneratorOutput(_text(doc, "reasoning"), tuple(kept), label, dropped_ids=tuple(map(str, dropped)))

    def first_pass_request(self, query, bank, ctx) -> VlmRequest:
        return self._request("generator_pass1", "generator.pass1", bank, **self._common(query, bank, ctx))

    def generate_first_pass(self, query, bank: KnowledgeBank, ctx: TaskContext) -> GeneratorOutput:
        return self._generate(self.first_pass_request(query, bank, ctx), bank, ctx)

    def second_pass_request(self, query, bank, ctx, first: GeneratorOutput) -> VlmRequest:
        return self._request(
            "generator_pass2",
            "generator.pass2",
            bank,
            first_pass_output=first.render(),
            **self._common(query, bank, ctx),
        )

    def generate_second_pass(self, query, bank, ctx, first: GeneratorOutput) -> GeneratorOutput:
        """Re-check pass; falls back to the first-pass answer (flagged degraded) on failure."""
        try:
            return self._generate(self.second_pass_request(query, bank, ctx, first), bank, ctx)
        except RoleFailure as exc:
            log.warning("second pass failed, keeping first-pass answer: %s", exc)
            return GeneratorOutput(first.reasoning, first.bullet_ids, first.final_answer, degraded=True)

    # -- reflector --------------------------------------------------------

    def reflect_correct_request(self, query, bank, ctx, gen: GeneratorOutput, truth: str) -> VlmRequest:
        return self._request(
            "reflector_correct",
            "reflector.correct",
            bank,
            execution_details=execution_details(gen, truth),
            **self._common(query, bank, ctx, include_candidates=bank.phase == "test"),
        )

    def reflect_correct(self, query, bank, ctx, gen: GeneratorOutput, truth: str) -> ReflectionOutput:
        request = self.reflect_correct_request(query, bank, ctx, gen, truth)

        def validate(doc):
            return ReflectionOutput(
                kind="correct",
                reasoning=_text(doc, "reasoning"),
                key_insight=_text(doc, "key_insight"),
                advice=_text(doc, "advice"),
                bullet_tags=parse_bullet_tags(doc["bullet_tags"]),
            )

        return call_with_repair(self.client, request, CORRECT_KEYS, self.r_schema, validate)

    def reflect_incorrect_request(self, query, bank, ctx, gen, truth, contrast: ContrastPair) -> VlmRequest:
        neg_png, pos_png = self.images.pair(contrast.hard_negative, contrast.hard_positive, self.plot_config)
        return self._request(
            "reflector_incorrect",
            "reflector.incorrect",
            bank,
            execution_details=execution_details(gen, truth),
            predict_label_image=ImagePart(neg_png),
            truth_label_image=ImagePart(pos_png),
            **self._common(query, bank, ctx, include_candidates=bank.phase == "test"),
        )

    def reflect_incorrect(self, query, bank, ctx, gen, truth, contrast: ContrastPair) -> ReflectionOutput:
        request = self.reflect_incorrect_request(query, bank, ctx, gen, truth, contrast)

        def validate(doc):
            return ReflectionOutput(
                kind="incorrect",
                error_identification=_text(doc, "error_identification"),
                root_cause_analysis=_text(doc, "root_cause_analysis"),
                correct_reasoning=_text(doc, "correct_reasoning"),
                key_insight=_text(doc, "key_insight"),
                bullet_tags=parse_bullet_tags(doc["bullet_tags"]),
            )

        return call_with_repair(self.client, request, INCORRECT_KEYS, self.r_schema, validate)

    # -- modifier ---------------------------------------------------------

    def operation_rules(self, bank: KnowledgeBank) -> str:
        lines = [f"Valid sections for ADD: {', '.join(SECTIONS)}."]
        if bank.phase == "test":
            lines.append("DELETE is not allowed at this stage, and prototype bullets cannot be modified.")
        return "\n".join(lines)

    def curate_request(self, bank, ctx, gen: GeneratorOutput, reflection: ReflectionOutput, query, truth: str) -> VlmRequest:
        return self._request(
            "modifier",
            "modifier",
            bank,
            execution_details=execution_details(gen, truth),
            reflection=reflection.render(),
            operation_rules=self.operation_rules(bank),
            **self._common(query, bank, ctx, include_candidates=bank.phase == "test"),
        )

    def curate(self, bank, ctx, gen: GeneratorOutput, reflection: ReflectionOutput, query, truth: str) -> ModifierOutput:
        """Ask the Modifier for bank operations; ADDs are scoped to `truth`.

        Unusable entries are dropped one by one; a wholly unusable reply yields
        no operations.
        """
        request = self.curate_request(bank, ctx, gen, reflection, query, truth)

        def validate(doc):
            if not isinstance(doc["operations"], list):
                raise SchemaError("operations", "operations must be a list")
            return doc

        try:
            doc = call_with_repair(self.client, request, MODIFIER_KEYS, self.r_schema, validate)
        except RoleFailure as exc:
            log.warning("modifier failed, no bank change: %s", exc)
            return ModifierOutput("", (), failed=True)
        ops, dropped = [], []
        for item in doc["operations"]:
            try:
                ops.append(parse_operation(item, truth))
            except MalformedOperation as exc:
                log.warning("%s: dropped operation %r: %s", request.request_tag, item, exc)
                dropped.append(item)
        return ModifierOutput(_text(doc, "reasoning"), tuple(ops), tuple(dropped))

    # -- warmup -----------------------------------------------------------

    def _gallery(self, samples) -> list:
        parts: list = []
        for i, s in enumerate(samples, start=1):
            parts.append(f"Sample {i} statistics:\n{summarize(s).render()}\nSample {i} image:\n")
            parts.append(self.image(s))
            parts.append("\n")
        return parts

    def _descriptors(self, request) -> list[str]:
        def validate(doc):
            value = doc["descriptors"]
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise SchemaError("descriptors", "descriptors must be a list of strings")
            return [v.strip() for v in value if v.strip()]

        return call_with_repair(self.client, request, DESCRIPTOR_KEYS, self.r_schema, validate)

    def describe_class_request(self, bank, ctx, label: str, samples) -> VlmRequest:
        return self._request(
            "warmup_intra",
            "warmup.intra",
            bank,
            tag_extra=label,
            dataset_information=ctx.dataset_information(),
            class_label=label,
            class_samples=self._gallery(samples),
        )

    def describe_class(self, bank, ctx, label: str, samples) -> list[str]:
        return self._descriptors(self.describe_class_request(bank, ctx, label, samples))

    def contrast_classes_request(self, bank, ctx, a: str, b: str, separability: str, samples_a, samples_b) -> VlmRequest:
        return self._request(
            "warmup_inter",
            "warmup.inter",
            bank,
            tag_extra=f"{a}~{b}",
            dataset_information=ctx.dataset_information(),
            separability=separability,
            class_a=a,
            class_b=b,
            class_a_samples=self._gallery(samples_a),
            class_b_samples=self._gallery(samples_b),
        )

    def contrast_classes(self, bank, ctx, a: str, b: str, separability: str, samples_a, samples_b) -> list[str]:
        return self._descriptors(self.contrast_classes_request(bank, ctx, a, b, separability, samples_a, samples_b))
