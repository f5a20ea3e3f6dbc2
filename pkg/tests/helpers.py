"""Shared builders for the test-suite: synthetic datasets and a rule-following mock model."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from kbtsc.agents import PromptTemplates, Roles, TaskContext
from kbtsc.data import Dataset, TimeSeriesSample, few_shot_split, load_ucr_tsv
from kbtsc.pipeline import Pipeline, RunConfig
from kbtsc.plotting import ImageCache, PlotConfig
from kbtsc.vlm_client import FunctionClient, ScriptedClient, TranscriptLog

DATA = Path(__file__).parent / "data"
SMALL_PLOT = PlotConfig(width_px=160, height_px=96, margin_px=8)


def synth_split(k=3, seed=0):
    train = load_ucr_tsv(DATA / "synth" / "SynthTrend_TRAIN.tsv", "SynthTrend", "synthetic drift")
    test = load_ucr_tsv(DATA / "synth" / "SynthTrend_TEST.tsv", "SynthTrend", "synthetic drift")
    return train, few_shot_split(train, k, seed, test=test)


def scripted_pipeline(script, run_dir=None, config=None, k=3, seed=0):
    """Pipeline over the synthetic dataset answering from `script` (path or entry list)."""
    train, split = synth_split(k, seed)
    transcript = TranscriptLog(Path(run_dir) / "transcript.jsonl" if run_dir else None)
    if isinstance(script, (str, Path)):
        client = ScriptedClient.from_jsonl(script, transcript)
    else:
        client = ScriptedClient(script, transcript)
    pipe = Pipeline(
        Roles(client, PromptTemplates(), SMALL_PLOT, ImageCache()),
        TaskContext.from_dataset(train),
        split,
        config or RunConfig(k=k, seed=seed),
        run_dir,
    )
    return pipe, client


# --------------------------------------------------------------------------
# crafted fixture where the bank materially helps


def _ramp(start, stop, rng, n=32):
    t = np.arange(n)
    return np.linspace(start, stop, n) + 0.05 * np.sin(2 * np.pi * t / 8 + rng.uniform(0, 6.28)) + rng.normal(0, 0.01, n)


def drift_datasets():
    """Class A is flat, class B ramps upward.

    The test stream opens with six B series whose level is low but whose climb
    is steep, then interleaves flat A, shallow low-level B and ordinary B.
    """
    rng = np.random.default_rng(11)
    train = []
    for i in range(8):
        train.append(TimeSeriesSample(_ramp(0.0, 0.0, rng), "A", f"tr{2 * i}"))
        train.append(TimeSeriesSample(_ramp(0.5, 1.5, rng), "B", f"tr{2 * i + 1}"))
    test = [TimeSeriesSample(_ramp(-0.5, 1.0, rng), "B", f"te{i}") for i in range(6)]
    for i in range(6):
        test.append(TimeSeriesSample(_ramp(0.0, 0.0, rng), "A", f"te{6 + 3 * i}"))
        test.append(TimeSeriesSample(_ramp(-0.3, 0.6, rng), "B", f"te{7 + 3 * i}"))
        test.append(TimeSeriesSample(_ramp(0.5, 1.5, rng), "B", f"te{8 + 3 * i}"))
    desc = "Flat series (A) versus upward drifting series (B)."
    return Dataset.from_samples("Drift", train, desc), Dataset.from_samples("Drift", test, desc)


_RULE = re.compile(r"^\[(\d+)\] RULE: (\w+) > (-?[\d.]+) => (\w+)\s*$")
_STAT = re.compile(r"(\w+)=(-?[\d.eE+-]+)")


def _section(prompt, title):
    start = prompt.index(f"### {title}\n") + len(title) + 5
    end = prompt.find("\n### ", start)
    return prompt[start : end if end != -1 else None]


def _stats(prompt):
    line = _section(prompt, "Query Sample Information").strip().splitlines()[0]
    stats = {k: float(v) for k, v in _STAT.findall(line)}
    stats["slope"] = stats.get("trend_slope", 0.0)
    return stats


def _rules(prompt):
    rules = []
    for line in _section(prompt, "Knowledge Bank").splitlines():
        m = _RULE.match(line.strip())
        if m:
            rules.append((int(m.group(1)), m.group(2), float(m.group(3)), m.group(4)))
    return rules


def _holds(rule, stats):
    return stats[rule[1]] > rule[2]


def _truth(prompt):
    return re.search(r"Truth label: (\w+)", prompt).group(1)


def rule_responder(request):
    """Deterministic stand-in for a model that follows RULE bullets literally.

    Generator: first matching rule wins, default label A. The second pass also
    spots a steep climb (slope > 0.04) when no rule fired. Reflector: helpful
    for rules that hold and agree with the label, harmful when they disagree.
    Modifier: proposes a level rule from a training error and a climb rule
    from a steep test sample labeled B.
    """
    tag, prompt = request.request_tag, request.text
    role, phase = tag.split("/")[:2]
    if role.startswith("warmup"):
        return json.dumps({"descriptors": ["see the statistics"]})
    stats, rules = _stats(prompt), _rules(prompt)
    if role.startswith("generator"):
        fired = [r for r in rules if _holds(r, stats)]
        if fired:
            answer, ids = fired[0][3], [fired[0][0]]
        elif role == "generator.pass2" and stats["slope"] > 0.04:
            answer, ids = "B", []
        else:
            answer, ids = "A", []
        return json.dumps({"reasoning": "rules", "bullet_ids": ids, "final_answer": answer})
    truth = _truth(prompt)
    if role.startswith("reflector"):
        tags = [
            {"id": r[0], "tag": "helpful" if r[3] == truth else "harmful"} for r in rules if _holds(r, stats)
        ]
        doc = {"reasoning": "", "key_insight": "", "advice": "", "bullet_tags": tags}
        doc.update(error_identification="", root_cause_analysis="", correct_reasoning="")
        return json.dumps(doc)
    ops = []
    kinds = {r[1] for r in rules}
    if phase == "train" and truth == "B" and "mean" not in kinds and '"error_identification"' in prompt:
        ops.append({"type": "ADD", "section": "strategy", "content": f"RULE: mean > {stats['mean'] / 2:.3f} => B"})
    if phase == "test" and truth == "B" and "slope" not in kinds and stats["slope"] > 0.04:
        ops.append({"type": "ADD", "section": "strategy", "content": "RULE: slope > 0.02 => B"})
    return json.dumps({"reasoning": "", "operations": ops})


def drift_pipeline(variant=None, run_dir=None):
    train, test = drift_datasets()
    split = few_shot_split(train, 3, 0, test=test)
    client = FunctionClient(rule_responder, TranscriptLog())
    roles = Roles(client, PromptTemplates(), SMALL_PLOT, ImageCache())
    return Pipeline(roles, TaskContext.from_dataset(train), split, RunConfig(k=3, seed=0), run_dir)
