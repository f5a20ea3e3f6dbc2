"""The knowledge bank: sectioned, ID-addressable bullets refined by atomic operations.

Every mutation (operations, tags, score changes, tier changes, purges, phase
changes) is appended to ``op_log`` as a plain dict, so a bank can be rebuilt
from its log alone with :meth:`KnowledgeBank.replay`.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from .errors import CorruptSnapshot, MalformedOperation, PhaseError

log = logging.getLogger(__name__)

SECTIONS = ("intra_class", "inter_class", "mistakes", "strategy", "background")
SECTION_TITLES = {
    "intra_class": "Intra-class features",
    "inter_class": "Inter-class features",
    "mistakes": "Mistakes to avoid",
    "strategy": "Distinguish strategy or insight",
    "background": "Dataset background and domain knowledge clues",
}
TAGS = ("helpful", "harmful", "neutral")
TAG_ALIASES = {"useful": "helpful", "useless": "harmful"}
TIERS = ("prototype", "reference", "candidate")
PHASES = ("warmup", "train", "test")
OP_KINDS = ("ADD", "MODIFY", "DELETE")

REFERENCE_CAPTION = "(suspicious but informative reference)"
CANDIDATE_CAPTION = "(unverified candidate knowledge, buffered; not used for classification)"

TAU_PROMOTE = 5
TAU_REMOVE = -2
AMBIGUITY_MIN_TAGS = 4
AMBIGUITY_MAX_RATIO = 0.5


def normalize_tag(tag) -> str | None:
    t = str(tag).strip().lower()
    t = TAG_ALIASES.get(t, t)
    return t if t in TAGS else None


def normalize_section(name) -> str | None:
    """Map a section key or title (any case, loose punctuation) to its key."""
    if name is None:
        return None
    raw = str(name).strip().lower()
    squashed = "".join(ch for ch in raw if ch.isalnum())
    for key, title in SECTION_TITLES.items():
        if squashed in ("".join(ch for ch in key if ch.isalnum()), "".join(ch for ch in title.lower() if ch.isalnum())):
            return key
    aliases = {
        "intraclass": "intra_class",
        "intraclassfeature": "intra_class",
        "interclass": "inter_class",
        "interclassfeature": "inter_class",
        "mistake": "mistakes",
        "mistakestoavoid": "mistakes",
        "strategies": "strategy",
        "insight": "strategy",
        "insights": "strategy",
        "distinguishstrategy": "strategy",
        "strategyorinsight": "strategy",
        "background": "background",
        "datasetbackground": "background",
        "domainknowledge": "background",
    }
    return aliases.get(squashed)


def _scope(value) -> tuple | None:
    if value is None:
        return None
    if isinstance(value, str):
        return (value,)
    scope = tuple(str(v) for v in value)
    return scope or None


@dataclass
class Bullet:
    id: int
    section: str
    content: str
    tags: dict = field(default_factory=lambda: {t: 0 for t in TAGS})
    tier: str = "prototype"
    score: int = 0
    created_phase: str = "warmup"
    class_scope: tuple | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "section": self.section,
            "content": self.content,
            "tags": {t: self.tags[t] for t in TAGS},
            "tier": self.tier,
            "score": self.score,
            "created_phase": self.created_phase,
            "class_scope": list(self.class_scope) if self.class_scope is not None else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Bullet":
        return cls(
            id=int(d["id"]),
            section=d["section"],
            content=d["content"],
            tags={t: int(d["tags"][t]) for t in TAGS},
            tier=d["tier"],
            score=int(d["score"]),
            created_phase=d["created_phase"],
            class_scope=_scope(d.get("class_scope")),
        )


@dataclass(frozen=True)
class BankOperation:
    kind: str
    section: str | None = None
    content: str | None = None
    target_id: int | None = None
    class_scope: tuple | None = None

    def __post_init__(self):
        kind = str(self.kind).upper()
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "class_scope", _scope(self.class_scope))
        if kind == "ADD":
            if self.section not in SECTIONS:
                raise MalformedOperation(f"ADD needs a valid section, got {self.section!r}")
            if not isinstance(self.content, str) or not self.content.strip():
                raise MalformedOperation("ADD needs non-empty content")
            if self.target_id is not None:
                raise MalformedOperation("ADD must not carry target_id")
        elif kind == "MODIFY":
            if not isinstance(self.target_id, int) or isinstance(self.target_id, bool):
                raise MalformedOperation("MODIFY needs an integer target_id")
            if not isinstance(self.content, str) or not self.content.strip():
                raise MalformedOperation("MODIFY needs non-empty content")
            if self.section is not None or self.class_scope is not None:
                raise MalformedOperation("MODIFY only carries target_id and content")
        elif kind == "DELETE":
            if not isinstance(self.target_id, int) or isinstance(self.target_id, bool):
                raise MalformedOperation("DELETE needs an integer target_id")
            if self.section is not None or self.content is not None or self.class_scope is not None:
                raise MalformedOperation("DELETE only carries target_id")
        else:
            raise MalformedOperation(f"unknown operation kind {self.kind!r}")

    @classmethod
    def add(cls, section, content, class_scope=None):
        return cls("ADD", section=section, content=content, class_scope=class_scope)

    @classmethod
    def modify(cls, target_id, content):
        return cls("MODIFY", target_id=target_id, content=content)

    @classmethod
    def delete(cls, target_id):
        return cls("DELETE", target_id=target_id)

    def to_dict(self) -> dict:
        if self.kind == "ADD":
            d = {"kind": "ADD", "section": self.section, "content": self.content}
            if self.class_scope is not None:
                d["class_scope"] = list(self.class_scope)
            return d
        if self.kind == "MODIFY":
            return {"kind": "MODIFY", "target_id": self.target_id, "content": self.content}
        return {"kind": "DELETE", "target_id": self.target_id}

    @classmethod
    def from_dict(cls, d: Mapping) -> "BankOperation":
        if not isinstance(d, Mapping):
            raise MalformedOperation(f"operation must be an object, got {type(d).__name__}")
        allowed = {"kind", "section", "content", "target_id", "class_scope"}
        extra = set(d) - allowed
        if extra:
            raise MalformedOperation(f"unexpected fields {sorted(extra)}")
        return cls(
            kind=d.get("kind", ""),
            section=d.get("section"),
            content=d.get("content"),
            target_id=d.get("target_id"),
            class_scope=d.get("class_scope"),
        )


@dataclass(frozen=True)
class ScoreUpdate:
    promoted: tuple = ()
    demoted: tuple = ()
    removed: tuple = ()


class KnowledgeBank:
    def __init__(self, phase: str = "warmup"):
        if phase not in PHASES:
            raise PhaseError(f"unknown phase {phase!r}")
        self.bullets: dict[int, Bullet] = {}
        self.next_id = 1
        self.phase = phase
        self.op_log: list[dict] = []
        self.step = 0
        if phase != "warmup":
            self._log({"kind": "PHASE", "phase": phase}, True)

    # -- bookkeeping ------------------------------------------------------

    def _log(self, op: dict, accepted: bool, reason: str | None = None, step=None, **extra) -> dict:
        entry = {"step": self.step if step is None else step, "op": op, "accepted": accepted}
        if reason is not None:
            entry["reason"] = reason
        entry.update(extra)
        self.op_log.append(entry)
        if not accepted:
            log.info("bank: rejected %s (%s)", op, reason)
        return entry

    def __len__(self):
        return len(self.bullets)

    def __contains__(self, bullet_id):
        return bullet_id in self.bullets

    def __getitem__(self, bullet_id) -> Bullet:
        return self.bullets[bullet_id]

    def copy(self) -> "KnowledgeBank":
        new = KnowledgeBank.__new__(KnowledgeBank)
        new.bullets = {i: replace(b, tags=dict(b.tags)) for i, b in self.bullets.items()}
        new.next_id, new.phase, new.step = self.next_id, self.phase, self.step
        new.op_log = list(self.op_log)  # entries are never mutated once logged
        return new

    def ids(self, tier: str | None = None, section: str | None = None) -> list[int]:
        return sorted(
            b.id
            for b in self.bullets.values()
            if (tier is None or b.tier == tier) and (section is None or b.section == section)
        )

    def set_phase(self, phase: str, step=None) -> None:
        if phase not in PHASES:
            raise PhaseError(f"unknown phase {phase!r}")
        self.phase = phase
        self._log({"kind": "PHASE", "phase": phase}, True, step=step)

    # -- operations -------------------------------------------------------

    def apply(self, ops: Iterable, step=None) -> list[dict]:
        """Apply ops in order; rejected ops are skipped and logged, never fatal."""
        entries = []
        for raw in ops:
            if isinstance(raw, BankOperation):
                op = raw
            else:
                try:
                    op = BankOperation.from_dict(raw)
                except MalformedOperation as exc:
                    entries.append(self._log(_jsonable(raw), False, f"Malformed: {exc}", step=step))
                    continue
            entries.append(self._apply_one(op, step))
        return entries

    def _apply_one(self, op: BankOperation, step) -> dict:
        d = op.to_dict()
        if op.kind == "ADD":
            bid = self.next_id
            self.next_id += 1
            test = self.phase == "test"
            self.bullets[bid] = Bullet(
                id=bid,
                section=op.section,
                content=op.content,
                tier="candidate" if test else "prototype",
                created_phase=self.phase,
                class_scope=op.class_scope,
            )
            return self._log(d, True, step=step, id=bid)

        target = self.bullets.get(op.target_id)
        if target is None:
            return self._log(d, False, f"UnknownTarget: {op.target_id}", step=step)
        if op.kind == "DELETE":
            if self.phase == "test":
                return self._log(d, False, "PhaseGate: DELETE is not allowed during test", step=step)
            del self.bullets[op.target_id]
            return self._log(d, True, step=step)
        if self.phase == "test" and target.tier == "prototype":
            return self._log(d, False, "PhaseGate: prototype bullets are frozen during test", step=step)
        target.content = op.content
        return self._log(d, True, step=step)

    def record_tags(self, tags: Iterable, step=None) -> list[dict]:
        """Increment tag counters; accepts (id, tag) pairs or {"id", "tag"} dicts."""
        entries = []
        for item in tags:
            if isinstance(item, Mapping):
                bid, tag = item.get("id"), item.get("tag")
            else:
                bid, tag = item
            norm = normalize_tag(tag)
            op = {"kind": "TAG", "target_id": bid, "tag": norm or tag}
            if norm is None:
                entries.append(self._log(_jsonable(op), False, f"Malformed: unknown tag {tag!r}", step=step))
            elif bid not in self.bullets:
                entries.append(self._log(_jsonable(op), False, f"UnknownTarget: {bid}", step=step))
            else:
                self.bullets[bid].tags[norm] += 1
                entries.append(self._log(op, True, step=step))
        return entries

    def _remove(self, bid: int, reason: str, step) -> None:
        del self.bullets[bid]
        self._log({"kind": "REMOVE", "target_id": bid}, True, reason, step=step)

    def _rescore(self, bid: int, delta: int, step) -> None:
        self.bullets[bid].score += delta
        self._log({"kind": "SCORE", "target_id": bid, "delta": delta}, True, step=step)

    def _retier(self, bid: int, tier: str, step) -> None:
        self.bullets[bid].tier = tier
        self._log({"kind": "TIER", "target_id": bid, "tier": tier}, True, step=step)

    # -- training-time discarding -----------------------------------------

    @staticmethod
    def should_discard(bullet: Bullet, tau_drop: int) -> str | None:
        if bullet.section == "background":
            return None
        helpful, harmful = bullet.tags["helpful"], bullet.tags["harmful"]
        if harmful > tau_drop:
            return f"harmful {harmful} > tau_drop {tau_drop}"
        total = helpful + harmful
        if total >= AMBIGUITY_MIN_TAGS and helpful / total < AMBIGUITY_MAX_RATIO:
            return f"ambiguous: helpful ratio {helpful}/{total}"
        return None

    def discard_sweep(self, tau_drop: int, step=None) -> list[int]:
        if self.phase != "train":
            raise PhaseError("discard_sweep runs only during train")
        purged = []
        for bid in sorted(self.bullets):
            reason = self.should_discard(self.bullets[bid], tau_drop)
            if reason:
                self._remove(bid, "Discard: " + reason, step)
                purged.append(bid)
        return purged

    # -- test-time deferred update ----------------------------------------

    def update_candidate_scores(
        self,
        pseudo_label: str,
        observed_ids: Iterable[int],
        tags: Sequence = (),
        tau_promote: int = TAU_PROMOTE,
        tau_remove: int = TAU_REMOVE,
        step=None,
    ) -> ScoreUpdate:
        """Observation counting for candidates/references scoped to the pseudo-label.

        Scoped candidate and reference bullets gain 1 when observed and lose 1
        otherwise; every reference also gains 1 per helpful and loses 1 per
        harmful tag in ``tags``. Candidates at or above ``tau_promote`` become
        references, references below it fall back to candidates, and anything
        at or below ``tau_remove`` is dropped.
        """
        if self.phase != "test":
            raise PhaseError("candidate scoring runs only during test")
        observed = set(observed_ids)
        pseudo_label = str(pseudo_label)
        start_tier = {b.id: b.tier for b in self.bullets.values() if b.tier != "prototype"}

        for bid in sorted(start_tier):
            b = self.bullets[bid]
            if b.class_scope and pseudo_label in b.class_scope:
                self._rescore(bid, 1 if bid in observed else -1, step)

        for item in tags:
            bid, tag = (item.get("id"), item.get("tag")) if isinstance(item, Mapping) else item
            tag = normalize_tag(tag)
            if start_tier.get(bid) == "reference" and tag in ("helpful", "harmful"):
                self._rescore(bid, 1 if tag == "helpful" else -1, step)

        promoted, demoted, removed = [], [], []
        for bid in sorted(start_tier):
            b = self.bullets[bid]
            if start_tier[bid] == "candidate":
                if b.score >= tau_promote:
                    self._retier(bid, "reference", step)
                    promoted.append(bid)
                elif b.score <= tau_remove:
                    self._remove(bid, f"Lifecycle: score {b.score} <= tau_remove {tau_remove}", step)
                    removed.append(bid)
            elif b.score < tau_promote:
                self._retier(bid, "candidate", step)
                demoted.append(bid)
                if b.score <= tau_remove:
                    self._remove(bid, f"Lifecycle: score {b.score} <= tau_remove {tau_remove}", step)
                    removed.append(bid)
        return ScoreUpdate(tuple(promoted), tuple(demoted), tuple(removed))

    # -- rendering --------------------------------------------------------

    def render_context(self, phase: str | None = None, include_candidates: bool = False) -> str:
        """Prompt text of the bank; candidates appear only when explicitly requested."""
        phase = phase or self.phase
        lines = []
        for section in SECTIONS:
            lines.append(f"## {SECTION_TITLES[section]}")
            in_section = [b for b in self.bullets.values() if b.section == section]
            groups = [("prototype", None)]
            if phase == "test":
                groups.append(("reference", REFERENCE_CAPTION))
                if include_candidates:
                    groups.append(("candidate", CANDIDATE_CAPTION))
            for tier, caption in groups:
                chosen = sorted((b for b in in_section if b.tier == tier), key=lambda b: b.id)
                if not chosen:
                    continue
                if caption:
                    lines.append(caption)
                lines.extend(f"[{b.id}] {b.content}" for b in chosen)
            lines.append("")
        return "\n".join(lines).rstrip("\n") + "\n"

    def rendered_ids(self, phase: str | None = None, include_candidates: bool = False) -> set:
        phase = phase or self.phase
        tiers = {"prototype"}
        if phase == "test":
            tiers.add("reference")
            if include_candidates:
                tiers.add("candidate")
        return {b.id for b in self.bullets.values() if b.tier in tiers}

    def token_count(self, phase: str | None = None) -> int:
        return len(self.render_context(phase).split())

    # -- persistence ------------------------------------------------------

    def state(self) -> dict:
        return {
            "phase": self.phase,
            "next_id": self.next_id,
            "bullets": [self.bullets[i].to_dict() for i in sorted(self.bullets)],
        }

    def to_dict(self) -> dict:
        d = self.state()
        d["op_log"] = copy.deepcopy(self.op_log)
        return d

    def snapshot(self) -> str:
        return json.dumps(self.to_dict(), indent=1, ensure_ascii=False) + "\n"

    @classmethod
    def restore(cls, text: str) -> "KnowledgeBank":
        try:
            doc = json.loads(text)
            bank = cls()
            if doc["phase"] not in PHASES:
                raise CorruptSnapshot(f"unknown phase {doc['phase']!r}")
            bank.phase = doc["phase"]
            bank.next_id = int(doc["next_id"])
            for bd in doc["bullets"]:
                b = Bullet.from_dict(bd)
                if b.section not in SECTIONS or b.tier not in TIERS or b.created_phase not in PHASES:
                    raise CorruptSnapshot(f"bullet {b.id}: invalid section/tier/phase")
                if b.id in bank.bullets:
                    raise CorruptSnapshot(f"duplicate bullet id {b.id}")
                if any(v < 0 for v in b.tags.values()):
                    raise CorruptSnapshot(f"bullet {b.id}: negative tag count")
                bank.bullets[b.id] = b
            if bank.bullets and bank.next_id <= max(bank.bullets):
                raise CorruptSnapshot("next_id must exceed every bullet id")
            log_entries = doc["op_log"]
            if not isinstance(log_entries, list) or not all(
                isinstance(e, dict) and {"step", "op", "accepted"} <= set(e) for e in log_entries
            ):
                raise CorruptSnapshot("op_log entries need step, op and accepted")
            bank.op_log = log_entries
            bank.step = max((e["step"] for e in log_entries if isinstance(e["step"], int)), default=0)
            return bank
        except CorruptSnapshot:
            raise
        except (ValueError, KeyError, TypeError, AttributeError, PhaseError) as exc:
            raise CorruptSnapshot(f"unreadable snapshot: {exc}") from exc

    @classmethod
    def replay(cls, op_log: Sequence[Mapping]) -> "KnowledgeBank":
        """Rebuild a bank by re-executing every accepted entry of ``op_log``."""
        bank = cls()
        for entry in op_log:
            if not entry["accepted"]:
                bank.op_log.append(copy.deepcopy(dict(entry)))
                continue
            op, step = entry["op"], entry["step"]
            kind = op["kind"]
            if kind == "PHASE":
                bank.set_phase(op["phase"], step=step)
            elif kind in OP_KINDS:
                (new,) = bank.apply([op], step=step)
                if not new["accepted"] or new.get("id") != entry.get("id"):
                    raise CorruptSnapshot(f"replay diverged at {entry}")
            elif kind == "TAG":
                bank.record_tags([(op["target_id"], op["tag"])], step=step)
            elif kind == "SCORE":
                bank._rescore(op["target_id"], op["delta"], step)
            elif kind == "TIER":
                bank._retier(op["target_id"], op["tier"], step)
            elif kind == "REMOVE":
                bank._remove(op["target_id"], entry.get("reason", ""), step)
            else:
                raise CorruptSnapshot(f"unknown op_log kind {kind!r}")
        return bank

    def __eq__(self, other):
        if not isinstance(other, KnowledgeBank):
            return NotImplemented
        return self.state() == other.state() and self.op_log == other.op_log

    def __repr__(self):
        return f"KnowledgeBank(phase={self.phase!r}, bullets={len(self.bullets)}, next_id={self.next_id})"


def _jsonable(value):
    try:
        json.dumps(value)
        return value
    except (TypeError, ValueError):
        return repr(value)


def tau_drop_for(n_training_steps: int) -> int:
    """Ten percent of the training steps, rounded up."""
    return -(-int(n_training_steps) // 10)
