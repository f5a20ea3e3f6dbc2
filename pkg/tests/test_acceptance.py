"""Acceptance criteria, one test per criterion.

Each test prints a single ``PASS criterion N: ...`` or ``FAIL criterion N: ...``
line straight to the terminal before asserting. Criterion 10 needs a live
endpoint and only runs with KBTSC_LIVE=1 (see README).

Golden files under tests/data/golden/expected are rewritten with
UPDATE_GOLDEN=1.
"""

import json
import math
import os
import random
import shutil
import time

import numpy as np
import pytest

from kbtsc.bank import SECTIONS, BankOperation, KnowledgeBank, tau_drop_for
from kbtsc.cli import run_command
from kbtsc.data import TimeSeriesSample
from kbtsc.features import fisher_score, rank_features, summarize
from kbtsc.pipeline import ABLATIONS, run_variant
from kbtsc.plotting import DEFAULT_PALETTE, PlotConfig, render_contrast_pair, render_line_plot, shared_range

from helpers import DATA, drift_pipeline, scripted_pipeline
from test_features import _random_summaries, oracle_channel, oracle_fisher, oracle_rank
from test_plotting import SMALL, foreground, pixels

EXPECTED = DATA / "golden" / "expected"
UPDATE = os.environ.get("UPDATE_GOLDEN") == "1"


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, f"criterion {n}: {detail}"

    return report


# --------------------------------------------------------------------------
# 1. bank semantics over randomized op sequences


def _random_op(rng, bank):
    kind = rng.choices(["ADD", "MODIFY", "DELETE"], weights=[5, 3, 2])[0]
    if kind == "ADD":
        return BankOperation.add(rng.choice(SECTIONS), f"note {rng.randrange(1000)}", class_scope=rng.choice("ab"))
    target = rng.randrange(1, bank.next_id + 2)
    if kind == "MODIFY":
        return BankOperation.modify(target, f"edit {rng.randrange(1000)}")
    return BankOperation.delete(target)


def _check_sequence(rng):
    """Drive one random sequence; returns a list of violation strings."""
    bank = KnowledgeBank()
    violations = []
    assigned = []
    phases = iter(["train", "test"])
    for _ in range(rng.randint(5, 30)):
        roll = rng.random()
        if roll < 0.08:
            nxt = next(phases, None)
            if nxt:
                bank.set_phase(nxt)
            continue
        if roll < 0.25:
            ids = list(bank.bullets) or [1]
            bank.record_tags([(rng.choice(ids), rng.choice(["helpful", "harmful", "neutral", "useful"]))])
            if bank.phase == "test":
                bank.update_candidate_scores(rng.choice("ab"), rng.sample(ids, min(len(ids), 2)))
            continue
        batch = [_random_op(rng, bank) for _ in range(rng.randint(1, 4))]
        folded = bank.copy()
        protos = {b.id: b.content for b in bank.bullets.values() if b.tier == "prototype"}
        entries = bank.apply(batch)
        for op in batch:
            folded.apply([op])
        if folded != bank:
            violations.append("batch differs from fold")
        for e in entries:
            if e["accepted"] and e["op"]["kind"] == "ADD":
                if e["id"] in assigned:
                    violations.append(f"id {e['id']} reused")
                assigned.append(e["id"])
            if bank.phase == "test" and e["op"]["kind"] == "DELETE" and e["accepted"]:
                violations.append("DELETE accepted at test")
        if bank.phase == "test" and {i: bank[i].content for i in protos if i in bank} != protos:
            violations.append("prototype changed at test")
    if KnowledgeBank.restore(bank.snapshot()) != bank:
        violations.append("snapshot round-trip differs")
    if KnowledgeBank.replay(bank.op_log) != bank:
        violations.append("replay differs")
    return violations


def test_criterion_1_bank_semantics(verdict):
    rng = random.Random(1)
    start = time.perf_counter()
    violations = [v for _ in range(1000) for v in _check_sequence(rng)]
    elapsed = time.perf_counter() - start
    verdict(1, not violations and elapsed < 10, f"1000 sequences, {len(violations)} violations, {elapsed:.2f}s")


# --------------------------------------------------------------------------
# 2. lifecycle, exhaustive trajectories


def _oracle_step(state, label, observed, tag):
    """Reference state machine: returns ((tier, score) or None once removed, event)."""
    tier, score = state
    if label == "a":
        score += 1 if observed else -1
    if tier == "reference" and tag:
        score += 1 if tag == "helpful" else -1
    if tier == "candidate":
        if score >= 5:
            return ("reference", score), "promoted"
        if score <= -2:
            return None, "removed"
        return (tier, score), None
    if score < 5:
        return (None, "removed") if score <= -2 else (("candidate", score), "demoted")
    return (tier, score), None


def _explore(alphabet, max_len):
    """Depth-first over every letter sequence up to max_len; counts mismatches."""
    root = KnowledgeBank("test")
    root.apply([BankOperation.add("strategy", "watch the slope", class_scope="a")])
    checked = mismatches = 0
    stack = [(root, ("candidate", 0), 0)]
    while stack:
        bank, state, depth = stack.pop()
        if depth == max_len:
            continue
        for label, observed, tag in alphabet:
            child = bank.copy()
            upd = child.update_candidate_scores(label, {1} if observed else set(), [(1, tag)] if tag else [])
            want, event = _oracle_step(state, label, observed, tag)
            got_event = "promoted" if upd.promoted else "removed" if upd.removed else "demoted" if upd.demoted else None
            got = (child[1].tier, child[1].score) if 1 in child else None
            checked += 1
            if got != want or got_event != event:
                mismatches += 1
            elif want is not None:
                stack.append((child, want, depth + 1))
    return checked, mismatches


def test_criterion_2_lifecycle(verdict):
    binary = [("a", True, None), ("a", False, None)]
    rich = binary + [("a", True, "helpful"), ("a", False, "harmful"), ("b", False, "helpful")]
    n1, bad1 = _explore(binary, 12)
    n2, bad2 = _explore(rich, 6)
    verdict(
        2,
        bad1 == bad2 == 0,
        f"{n1} transitions over +/-1 trajectories of length <= 12 and {n2} with tags, {bad1 + bad2} mismatches",
    )


# --------------------------------------------------------------------------
# 3. discard rule against the tag log


def _brute_force_purge(op_log, tau_drop, sections):
    """Re-evaluate the discard rule from scratch over the log preceding the sweep."""
    counts, gone = {}, set()
    for e in op_log:
        if e["accepted"] and e["op"]["kind"] == "REMOVE" and e.get("reason", "").startswith("Discard"):
            break
        if e["accepted"] and e["op"]["kind"] in ("DELETE", "REMOVE"):
            gone.add(e["op"]["target_id"])
        if e["accepted"] and e["op"]["kind"] == "TAG":
            c = counts.setdefault(e["op"]["target_id"], {"helpful": 0, "harmful": 0, "neutral": 0})
            c[e["op"]["tag"]] += 1
    out = []
    for bid, c in counts.items():
        if bid in gone or sections.get(bid, "background") == "background":
            continue
        h, x = c["helpful"], c["harmful"]
        if x > tau_drop or (h + x >= 4 and h / (h + x) < 0.5):
            out.append(bid)
    return sorted(out)


def test_criterion_3_discard(verdict):
    pipe, _ = scripted_pipeline(DATA / "golden" / "script.jsonl")
    bank = pipe.warmup()
    pipe.train(bank)
    sections = {e["id"]: e["op"]["section"] for e in bank.op_log if e["accepted"] and e["op"]["kind"] == "ADD"}
    golden_ok = pipe.records[-1].purged == _brute_force_purge(bank.op_log, pipe.tau_drop(), sections) == [11]

    rng = random.Random(3)
    random_bad = 0
    for _ in range(500):
        b = KnowledgeBank("train")
        b.apply([BankOperation.add(rng.choice(SECTIONS), "x") for _ in range(6)])
        b.record_tags([(rng.randint(1, 6), rng.choice(["helpful", "harmful", "neutral"])) for _ in range(rng.randint(0, 30))])
        tau = rng.randint(0, 4)
        secs = {x.id: x.section for x in b.bullets.values()}
        if b.discard_sweep(tau) != _brute_force_purge(b.op_log, tau, secs):
            random_bad += 1
    tau_ok = tau_drop_for(12) == pipe.tau_drop() == 2 and tau_drop_for(len(pipe.split.pool)) == math.ceil(0.1 * 12)
    verdict(
        3,
        golden_ok and tau_ok and random_bad == 0,
        f"tau_drop(12)={tau_drop_for(12)}, golden purge {pipe.records[-1].purged}, {random_bad}/500 random logs disagree",
    )


# --------------------------------------------------------------------------
# 4. numerics


def test_criterion_4_numerics(verdict):
    rng = random.Random(4)
    fisher_err = scale_err = 0.0
    for _ in range(1000):
        a = [rng.uniform(-50, 50) for _ in range(rng.randint(1, 8))]
        b = [rng.uniform(-50, 50) for _ in range(rng.randint(1, 8))]
        want = oracle_fisher(a, b)
        fisher_err = max(fisher_err, abs(fisher_score(a, b) - want) / max(1.0, abs(want)))
        if len(a) > 1 and len(b) > 1:
            c = rng.choice([1e-3, 0.5, 7.0, 1e3])
            base = fisher_score(a, b)
            scale_err = max(scale_err, abs(fisher_score([c * x for x in a], [c * x for x in b]) - base) / max(1.0, base))

    summ_err = 0.0
    for _ in range(300):
        xs = [rng.uniform(-1e3, 1e3) for _ in range(rng.randint(1, 40))]
        got, want = summarize(xs).channels[0], oracle_channel(xs)
        scale = max(1.0, max(abs(x) for x in xs))
        for name in ("min", "max", "mean", "std", "median", "slope"):
            if want[name] is not None:
                summ_err = max(summ_err, abs(getattr(got, name) - want[name]) / scale)
        summ_err = max(summ_err, abs(got.variance - want["variance"]) / scale**2)
        if got.mean_crossings != want["mean_crossings"] or got.period != want["period"]:
            summ_err = math.inf

    rank_bad = 0
    for _ in range(25):
        train = {"a": _random_summaries(rng, 3, 0.0), "b": _random_summaries(rng, 3, rng.uniform(0.2, 3.0))}
        got = rank_features(train, ("a", "b"), top_n=100).ranked_features
        want = oracle_rank(train, ("a", "b"))
        if len(got) != len(want) or any(abs(g.normalized - w[1]) > 1e-9 for g, w in zip(got, want)):
            rank_bad += 1
    ok = fisher_err <= 1e-9 and scale_err <= 1e-9 and summ_err <= 1e-9 and rank_bad == 0
    verdict(
        4,
        ok,
        f"fisher err {fisher_err:.1e}, scale err {scale_err:.1e}, summarize err {summ_err:.1e}, rank mismatches {rank_bad}/25",
    )


# --------------------------------------------------------------------------
# 5. rendering


def test_criterion_5_rendering(verdict):
    rng = np.random.default_rng(5)
    cfg = PlotConfig(width_px=128, height_px=96, margin_px=6)
    nondeterministic = 0
    for i in range(100):
        s = TimeSeriesSample(rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(1, 60)))), "a", f"s{i}")
        if render_line_plot(s, cfg) != render_line_plot(s, cfg):
            nondeterministic += 1

    non_monotone = 0
    for _ in range(50):
        values = np.cumsum(rng.uniform(0.01, 1.0, size=int(rng.integers(3, 40))))
        xs, ys = foreground(render_line_plot(values, SMALL), DEFAULT_PALETTE[0])
        tops = [ys[xs == x].min() for x in sorted(set(xs.tolist()))]
        if any(b > a for a, b in zip(tops, tops[1:])):
            non_monotone += 1

    non_compositional = 0
    for _ in range(20):
        a = TimeSeriesSample(rng.normal(size=(2, 30)) * rng.uniform(0.1, 5), "a", "x")
        b = TimeSeriesSample(rng.normal(size=(2, 30)) + rng.uniform(-3, 3), "b", "y")
        pos, neg = render_contrast_pair(a, b, SMALL)
        fixed = PlotConfig(**{**SMALL.to_dict(), "y_range": shared_range(a, b)})
        if (render_line_plot(a, fixed), render_line_plot(b, fixed)) != (pos, neg) or pixels(pos).shape != pixels(neg).shape:
            non_compositional += 1
    verdict(
        5,
        nondeterministic == non_monotone == non_compositional == 0,
        f"{nondeterministic}/100 nondeterministic, {non_monotone}/50 non-monotone, {non_compositional}/20 non-compositional pairs",
    )


# --------------------------------------------------------------------------
# 6. golden end-to-end run


GOLDEN_FILES = {"bank_step_22.json": "bank_final.json", "steps.jsonl": "steps.jsonl", "metrics.json": "metrics.json"}


def test_criterion_6_golden_run(verdict, tmp_path):
    start = time.perf_counter()
    code = run_command(["run", "--config", str(DATA / "golden" / "config.json"), "--out", str(tmp_path)])
    elapsed = time.perf_counter() - start
    if UPDATE:
        EXPECTED.mkdir(exist_ok=True)
        for produced, stored in GOLDEN_FILES.items():
            shutil.copyfile(tmp_path / produced, EXPECTED / stored)
    differing = [p for p, s in GOLDEN_FILES.items() if (tmp_path / p).read_bytes() != (EXPECTED / s).read_bytes()]
    accuracy = json.loads((tmp_path / "metrics.json").read_text())["accuracy"]
    verdict(
        6,
        code == 0 and not differing and accuracy == 1.0 and elapsed < 30,
        f"accuracy {accuracy}, {elapsed:.2f}s, differing golden files: {differing or 'none'}",
    )


# --------------------------------------------------------------------------
# 7. branch coverage


def test_criterion_7_branches(verdict, tmp_path):
    code = run_command(["run", "--config", str(DATA / "branch" / "config.json"), "--out", str(tmp_path)])
    tags = [json.loads(l)["request_tag"] for l in (tmp_path / "transcript.jsonl").read_text().splitlines()]
    steps = [json.loads(l) for l in (tmp_path / "steps.jsonl").read_text().splitlines()]
    train_contrast = [s["step"] for s in steps if s["phase"] == "train" and s["contrast"]]
    test_contrast = [s["step"] for s in steps if s["phase"] == "test" and s["contrast"]]
    inc_train = [t for t in tags if t.startswith("reflector.incorrect/train/")]
    inc_test = [t for t in tags if t.startswith("reflector.incorrect/test/")]
    disagree = [s["step"] for s in steps if s["phase"] == "test" and s["pass1"] != s["pass2"]]
    ok = (
        code == 0
        and train_contrast == [1]
        and inc_train == ["reflector.incorrect/train/1"]
        and disagree == [13]
        and inc_test == ["reflector.incorrect/test/13"]
        and test_contrast == [13]
    )
    verdict(
        7,
        ok,
        f"training contrast retrievals at {train_contrast}, incorrect-case reflections {inc_train + inc_test}, "
        f"pass disagreement at {disagree}",
    )


# --------------------------------------------------------------------------
# 8. ablation ordering


def test_criterion_8_ablation_order(verdict):
    acc = {v: run_variant(v, drift_pipeline).accuracy for v in ABLATIONS}
    full, no_update, frozen = acc["full"], acc["w/o update"], acc["w/o train refine & test update"]
    summary = ", ".join(f"{k}={v:.3f}" for k, v in acc.items())
    verdict(8, full >= no_update >= frozen and full > frozen, summary)


# --------------------------------------------------------------------------
# 9. token growth


def test_criterion_9_token_growth(verdict):
    steps = [json.loads(l) for l in (EXPECTED / "steps.jsonl").read_text().splitlines()]
    counts = [s["token_count"] for s in steps if s["phase"] in ("warmup", "train")]
    n = len(counts) - 1  # training steps after warmup
    early = counts[: n // 3 + 1]
    final = counts[n - n // 3 :]
    change = (max(final) - min(final)) / final[0]
    ok = all(b >= a for a, b in zip(early, early[1:])) and change < 0.05
    verdict(9, ok, f"early {early}, final third {final}, change {change:.1%}")


# --------------------------------------------------------------------------
# 10. live endpoint (optional)


@pytest.mark.live
def test_criterion_10_live(verdict, tmp_path):
    from kbtsc.agents import PromptTemplates, Roles, TaskContext
    from kbtsc.pipeline import Pipeline, RunConfig
    from kbtsc.plotting import ImageCache
    from kbtsc.vlm_client import RemoteClient, RemoteConfig, TranscriptLog

    from helpers import synth_split

    cfg = RemoteConfig(
        base_url=os.environ.get("KBTSC_LIVE_BASE_URL", RemoteConfig.base_url),
        model=os.environ.get("KBTSC_LIVE_MODEL", RemoteConfig.model),
        api_key_env=os.environ.get("KBTSC_LIVE_KEY_ENV", RemoteConfig.api_key_env),
    )
    train, split = synth_split()
    client = RemoteClient(cfg, TranscriptLog(tmp_path / "transcript.jsonl"))
    pipe = Pipeline(Roles(client, PromptTemplates(), PlotConfig(), ImageCache()), TaskContext.from_dataset(train), split, RunConfig(), tmp_path)
    bank = pipe.warmup()
    final, rec = pipe.test_step(split.test[0], bank)
    ok = not pipe.records[0].errors and not rec.errors and not rec.degraded and final in train.label_set
    verdict(10, ok, f"warmup {len(bank)} bullets, test answer {final!r}, errors {rec.errors}")
