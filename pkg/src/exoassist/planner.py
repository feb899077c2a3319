"""Stepwise task planning with anomaly-triggered replanning.

The planner scores candidate subtasks with a pluggable scorer (a
deterministic rule scorer for tests and offline use, or a remote language
model client), takes the argmax, then scores the chosen subtask's
parameter bindings the same way. A live anomaly feed can clear the plan
mid-generation; the harness additionally clears it during execution when
the score crosses the threshold.
"""
from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path

__all__ = [
    "PlanError",
    "Subtask",
    "SubtaskLibrary",
    "default_library",
    "PlanStep",
    "Plan",
    "PlanResult",
    "ScorerQuery",
    "ScoreResult",
    "ItemRecord",
    "RuleScorer",
    "rule_score",
    "replan_check",
    "plan",
    "PlannerRuntime",
    "load_corpus",
    "load_targets",
    "evaluate_corpus",
    "data_path",
]

DEFAULT_THRESHOLD = 0.5


class PlanError(RuntimeError):
    """Planning aborted: scorer failure, empty library, or runaway loop."""


def data_path(name: str) -> Path:
    return Path(__file__).parent / "data" / name


# ---------------------------------------------------------------------------
# subtask library


@dataclass(frozen=True)
class Subtask:
    name: str
    description: str
    configurable: bool
    bindings: tuple = ()  # (label, args) pairs for configurable subtasks


@dataclass(frozen=True)
class SubtaskLibrary:
    subtasks: tuple[Subtask, ...]

    def __post_init__(self):
        if not self.subtasks:
            raise PlanError("subtask library is empty")

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.subtasks]

    def get(self, name: str) -> Subtask:
        for s in self.subtasks:
            if s.name == name:
                return s
        raise KeyError(name)

    def describe_functions(self) -> str:
        return "\n".join(f"- {s.name}: {s.description}" for s in self.subtasks)


def default_library(target_names=("mouth", "chest", "shelf"),
                    predefined=("catch_prep", "arm_swing")) -> SubtaskLibrary:
    subtasks = [
        Subtask(
            name="set_mode",
            description="Set controller mode. Input Mode: 0 for transparent mode "
                        "(wearer moves freely, used for grasping), 1 for impedance "
                        "mode (robot assists).",
            configurable=True,
            bindings=tuple((f"set_mode({m})", {"mode": m}) for m in (0, 1)),
        ),
        Subtask(
            name="paramset",
            description="Configure assistance parameters. Input Imp: 0 for low "
                        "intensity (w=2), 1 for high stiffness and damping (w=0.5). "
                        "Input Spd: 0 for low speed (5 s, 30 deg/s), 1 for high "
                        "speed (2 s, 70 deg/s).",
            configurable=True,
            bindings=tuple(
                (f"paramset(Spd={s}, Imp={i})", {"spd": s, "imp": i})
                for s in (0, 1) for i in (0, 1)
            ),
        ),
        Subtask(
            name="go_target",
            description="Move the arm to a named target place relative to the "
                        f"wearer. Known targets: {', '.join(target_names)}.",
            configurable=True,
            bindings=tuple(
                (f"go_target({t})", {"target": t}) for t in target_names
            ),
        ),
        *[
            Subtask(
                name=f"predefined:{p}",
                description=f"Execute the predefined movement '{p}'.",
                configurable=False,
            )
            for p in predefined
        ],
        Subtask(name="done", description="Task complete; end the plan.",
                configurable=False),
    ]
    return SubtaskLibrary(subtasks=tuple(subtasks))


# ---------------------------------------------------------------------------
# plans


@dataclass
class PlanStep:
    name: str
    args: dict
    label: str


@dataclass
class Plan:
    steps: list[PlanStep] = field(default_factory=list)
    cursor: int = 0
    valid: bool = True
    invalid_reason: str | None = None

    def clear(self) -> None:
        self.steps = []
        self.cursor = 0

    @property
    def finished(self) -> bool:
        return self.cursor >= len(self.steps)

    def current(self) -> PlanStep | None:
        return None if self.finished else self.steps[self.cursor]

    def advance(self) -> None:
        self.cursor += 1

    def require_bound(self, library: SubtaskLibrary) -> None:
        """No configurable subtask may execute with unbound parameters."""
        for step in self.steps:
            sub = library.get(step.name)
            if sub.configurable:
                expected = {k for _, args in sub.bindings for k in args}
                if not expected.issubset(step.args.keys()):
                    raise PlanError(
                        f"subtask {step.name} has unbound parameters: "
                        f"{sorted(expected - set(step.args))}")


@dataclass
class PlanResult:
    plan: Plan | None
    needs_clarification: bool = False
    trace: list = field(default_factory=list)
    replans_during_planning: int = 0


# ---------------------------------------------------------------------------
# scoring interface


@dataclass(frozen=True)
class ScorerQuery:
    prompt: str
    task: str
    candidate: str
    context: str | None = None     # chosen-subtask description for config queries
    history: tuple[str, ...] = ()  # labels of steps already in the plan


@dataclass(frozen=True)
class ScoreResult:
    probability: float
    needs_clarification: bool = False
    invalid: bool = False


# ---------------------------------------------------------------------------
# item corpus and the deterministic rule scorer


@dataclass(frozen=True)
class ItemRecord:
    name: str
    category: str  # food | household | heavy
    dangerous: bool
    fragile: bool
    heavy: bool
    expected_spd: int
    expected_imp: int
    expected_end_impedance: bool

    @staticmethod
    def expected_from_labels(dangerous: bool, fragile: bool, heavy: bool):
        """The rule table.

        Spd = 1 only for light, safe, robust items; Imp = 1 for heavy or
        non-fragile items (firm support unless the object needs a gentle
        touch); the end mode stays impedance after heavy or dangerous items.
        """
        spd = 0 if (dangerous or fragile or heavy) else 1
        imp = 1 if (heavy or not fragile) else 0
        end_imp = bool(heavy or dangerous)
        return spd, imp, end_imp

    @property
    def labels(self) -> dict:
        return {"dangerous": self.dangerous, "fragile": self.fragile, "heavy": self.heavy}

    def consistent(self) -> bool:
        return (self.expected_spd, self.expected_imp, self.expected_end_impedance) == \
            self.expected_from_labels(self.dangerous, self.fragile, self.heavy)


def load_corpus(path: str | Path, strict: bool = True) -> list[ItemRecord]:
    """JSON-lines corpus; malformed rows are rejected with line numbers."""
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            labels = raw["labels"]
            expected = raw["expected"]
            rec = ItemRecord(
                name=raw["name"],
                category=raw["category"],
                dangerous=bool(labels["dangerous"]),
                fragile=bool(labels["fragile"]),
                heavy=bool(labels["heavy"]),
                expected_spd=int(expected["spd"]),
                expected_imp=int(expected["imp"]),
                expected_end_impedance=bool(expected["end_impedance"]),
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise ValueError(f"corpus line {lineno}: malformed record ({exc})") from exc
        if raw["category"] not in ("food", "household", "heavy"):
            raise ValueError(f"corpus line {lineno}: unknown category {raw['category']!r}")
        if strict and not rec.consistent():
            raise ValueError(
                f"corpus line {lineno}: expected bits inconsistent with labels "
                f"for {rec.name!r}")
        records.append(rec)
    return records


def load_targets(path: str | Path | None = None) -> dict[str, list[float]]:
    """Named joint-space targets, degrees in the file."""
    path = Path(path) if path else data_path("targets.json")
    raw = json.loads(path.read_text())
    return {k: [float(v) for v in vals] for k, vals in raw.items()}


_WORD = re.compile(r"[a-z0-9]+")

_TARGET_HINTS = {
    "mouth": "mouth", "drink": "mouth", "eat": "mouth", "sip": "mouth",
    "chest": "chest", "hand": "chest", "give": "chest", "me": None,
    "shelf": "shelf", "place": "shelf", "put": "shelf", "store": "shelf",
}


def _tokens(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def match_item(task: str, items: list[ItemRecord]) -> ItemRecord | None:
    """Best token-overlap match of an item name inside the task text."""
    toks = set(_tokens(task))
    best, best_key = None, (0.0, 0, "")
    for item in items:
        name_toks = _tokens(item.name)
        if not name_toks:
            continue
        overlap = sum(1 for t in name_toks if t in toks) / len(name_toks)
        if overlap <= 0.0:
            continue
        key = (overlap, len(name_toks), item.name)
        if key > best_key:
            best, best_key = item, key
    return best


def extract_target(task: str, target_names=("mouth", "chest", "shelf")) -> str:
    toks = _tokens(task)
    for name in target_names:  # explicit mention wins
        if name in toks:
            return name
    for tok in toks:
        hint = _TARGET_HINTS.get(tok)
        if hint:
            return hint
    return "chest"


class RuleScorer:
    """Deterministic stand-in for the language model.

    Builds the canonical plan for the matched item and scores 1.0 for
    whichever candidate continues that plan, 0.0 otherwise.
    """

    def __init__(self, items: list[ItemRecord],
                 target_names=("mouth", "chest", "shelf")):
        self.items = list(items)
        self.target_names = tuple(target_names)

    def canonical_plan(self, task: str) -> list[tuple[str, str]] | None:
        item = match_item(task, self.items)
        if item is None:
            return None
        # derive bits from the labels the database knows, not from the
        # evaluation ground truth: mislabeled items must mispredict
        spd, imp, end_imp = ItemRecord.expected_from_labels(
            item.dangerous, item.fragile, item.heavy)
        target = extract_target(task, self.target_names)
        steps = [
            ("set_mode", "set_mode(0)"),
            ("paramset", f"paramset(Spd={spd}, Imp={imp})"),
            ("go_target", f"go_target({target})"),
        ]
        if end_imp:
            steps.append(("set_mode", "set_mode(1)"))
        steps.append(("done", "done"))
        return steps

    def score(self, query: ScorerQuery) -> ScoreResult:
        steps = self.canonical_plan(query.task)
        if steps is None:
            return ScoreResult(probability=0.5, needs_clarification=True)
        idx = len(query.history)
        if idx >= len(steps):
            expected_name, expected_label = "done", "done"
        else:
            expected_name, expected_label = steps[idx]
        if query.context is None:
            return ScoreResult(probability=1.0 if query.candidate == expected_name else 0.0)
        return ScoreResult(probability=1.0 if query.candidate == expected_label else 0.0)


def rule_score(query: ScorerQuery, item_db: list[ItemRecord]) -> ScoreResult:
    """Single-query form of the rule scorer."""
    return RuleScorer(item_db).score(query)


# ---------------------------------------------------------------------------
# Algorithm-1 planning loop


def replan_check(s: float, s_bar: float = DEFAULT_THRESHOLD) -> bool:
    """True exactly when the anomaly score reaches the threshold."""
    return s >= s_bar


def _argmax(labels: list[str], scores: list[float]) -> int:
    """Argmax with ties broken toward the earliest candidate."""
    best, best_score = 0, -float("inf")
    for i, sc in enumerate(scores):
        if sc > best_score:
            best, best_score = i, sc
    return best


def plan(task: str, scorer, library: SubtaskLibrary,
         anomaly_feed=None, s_bar: float = DEFAULT_THRESHOLD,
         prompt: str = "", max_steps: int = 16) -> PlanResult:
    """Generate a plan stepwise: score subtasks, argmax, score configurations,
    argmax, append; clear and restart if the anomaly feed crosses s_bar."""
    steps: list[PlanStep] = []
    trace: list[dict] = []
    replans = 0
    iterations = 0

    while True:
        iterations += 1
        if iterations > 4 * max_steps:
            raise PlanError(f"planning did not terminate within {4 * max_steps} iterations")

        s = float(anomaly_feed()) if anomaly_feed is not None else 0.0
        history = tuple(step.label for step in steps)

        scores1 = []
        for sub in library.subtasks:
            q = ScorerQuery(prompt=prompt, task=task, candidate=sub.name, history=history)
            r = scorer.score(q)
            if r.needs_clarification:
                trace.append({"type": "clarification", "task": task})
                return PlanResult(plan=None, needs_clarification=True, trace=trace)
            if r.invalid:
                return PlanResult(
                    plan=Plan(valid=False, invalid_reason="scorer produced an "
                              "unrecognized selection"),
                    trace=trace)
            scores1.append(r.probability)
        pick = library.subtasks[_argmax(library.names, scores1)]
        trace.append({"type": "subtask", "candidates": library.names,
                      "scores": scores1, "choice": pick.name})

        if pick.configurable:
            scores2 = []
            labels = [label for label, _ in pick.bindings]
            for label, _ in pick.bindings:
                q = ScorerQuery(prompt=prompt, task=task, candidate=label,
                                context=pick.description, history=history)
                r = scorer.score(q)
                if r.invalid:
                    return PlanResult(
                        plan=Plan(valid=False,
                                  invalid_reason="scorer produced an unrecognized "
                                  "configuration"),
                        trace=trace)
                scores2.append(r.probability)
            j = _argmax(labels, scores2)
            label, args = pick.bindings[j]
            trace.append({"type": "configuration", "candidates": labels,
                          "scores": scores2, "choice": label})
            steps.append(PlanStep(name=pick.name, args=dict(args), label=label))
        else:
            steps.append(PlanStep(name=pick.name, args={}, label=pick.name))

        if replan_check(s, s_bar):
            trace.append({"type": "replan", "score": s})
            steps = []
            replans += 1
            continue

        if pick.name == "done":
            break
        if len(steps) > max_steps:
            raise PlanError(f"plan exceeded {max_steps} steps without 'done'")

    result = Plan(steps=steps)
    result.require_bound(library)
    return PlanResult(plan=result, trace=trace, replans_during_planning=replans)


# ---------------------------------------------------------------------------
# runtime handoff (control loop never blocks on the scorer)


class PlannerRuntime:
    """Owns planning off the control tick; the loop polls for results.

    ``background=True`` runs each planning request on a worker thread; the
    handoff is a slot guarded by a lock that ``poll`` clears on read.
    """

    def __init__(self, scorer, library: SubtaskLibrary, prompt: str = "",
                 s_bar: float = DEFAULT_THRESHOLD, background: bool = False):
        self.scorer = scorer
        self.library = library
        self.prompt = prompt
        self.s_bar = s_bar
        self.background = background
        self._lock = threading.Lock()
        self._slot: PlanResult | None = None
        self._busy = False
        self.events: list[dict] = []

    @property
    def busy(self) -> bool:
        return self._busy

    def request_plan(self, task: str, anomaly_feed=None) -> None:
        with self._lock:
            self._slot = None
            self._busy = True

        def work():
            try:
                result = plan(task, self.scorer, self.library,
                              anomaly_feed=anomaly_feed, s_bar=self.s_bar,
                              prompt=self.prompt)
            except PlanError as exc:
                result = PlanResult(plan=Plan(valid=False, invalid_reason=str(exc)))
            with self._lock:
                self._slot = result
                self._busy = False

        if self.background:
            threading.Thread(target=work, daemon=True).start()
        else:
            work()

    def poll(self) -> PlanResult | None:
        with self._lock:
            result, self._slot = self._slot, None
            return result

    def record(self, event: dict) -> None:
        self.events.append(event)


# ---------------------------------------------------------------------------
# corpus evaluation


def plan_semantics(p: Plan) -> dict:
    """Extract (spd, imp, end mode) from a finished plan's steps."""
    spd = imp = None
    end_impedance = False
    for step in p.steps:
        if step.name == "paramset":
            spd, imp = step.args.get("spd"), step.args.get("imp")
        if step.name == "set_mode":
            end_impedance = step.args.get("mode") == 1
        if step.name == "done":
            break
    return {"spd": spd, "imp": imp, "end_impedance": end_impedance}


def evaluate_corpus(corpus: list[ItemRecord], scorer, library: SubtaskLibrary,
                    task_template: str = "help me carry the {name}",
                    prompt: str = "") -> dict:
    """Per-item semantic bits against expectations, with the four-way error
    breakdown (impedance / speed / combined / end mode)."""
    per_item = []
    buckets = {"impedance": 0, "speed": 0, "combined": 0, "end_mode": 0}
    n_success = 0
    n_valid = 0
    for item in corpus:
        task = task_template.format(name=item.name)
        result = plan(task, scorer, library, prompt=prompt)
        row = {"name": item.name, "task": task,
               "expected": {"spd": item.expected_spd, "imp": item.expected_imp,
                            "end_impedance": item.expected_end_impedance}}
        if result.plan is None or not result.plan.valid:
            row["valid"] = False
            row["success"] = False
            per_item.append(row)
            continue
        n_valid += 1
        sem = plan_semantics(result.plan)
        row["valid"] = True
        row["predicted"] = sem
        spd_err = sem["spd"] != item.expected_spd
        imp_err = sem["imp"] != item.expected_imp
        end_err = sem["end_impedance"] != item.expected_end_impedance
        success = not (spd_err or imp_err or end_err)
        row["success"] = success
        if success:
            n_success += 1
        elif spd_err and imp_err:
            buckets["combined"] += 1
        elif imp_err:
            buckets["impedance"] += 1
        elif spd_err:
            buckets["speed"] += 1
        elif end_err:
            buckets["end_mode"] += 1
        per_item.append(row)
    n = len(corpus)
    return {
        "schema_version": 1,
        "n_items": n,
        "success_rate": n_success / n if n else 0.0,
        "validity_rate": n_valid / n if n else 0.0,
        "error_breakdown": buckets,
        "per_item": per_item,
    }
