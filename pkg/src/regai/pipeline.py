"""Rubric generation, review, scoring and the critique cycle.

The scorer and critic each keep their own transcript. The scorer sees the
rubric, the text and exemplars, then each critique as a user message; the
critic sees the rubric, the text and the whole chain of drafts with its
own earlier critiques. Every provider call is logged as one ``prompt``
and one ``completion`` event.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence, Union

from . import __version__
from .audit import AuditEvent, AuditLog, Recorder, sha256_json
from .domain import (
    Critique,
    ParseError,
    RecordText,
    Rubric,
    RubricEdit,
    ScoreSet,
    ValidationError,
    Verdict,
    apply_edits,
    critique_to_dict,
    highlight_spans,
    parse_rubric,
    render_rubric,
    scoreset_to_dict,
)
from .llm import (
    BlockNotFound,
    CompletionParams,
    Provider,
    ProviderError,
    Role,
    Transcript,
    check_critique_criteria,
    complete,
    extract_block,
    parse_critique_payload,
    parse_scoreset_payload,
    render_critique_payload,
    render_scoreset_payload,
)
from .retrieval import (
    Embedder,
    ExemplarStore,
    Match,
    RetrievalConfig,
    StoreKind,
    select_exemplar,
    top_k_balanced,
)
from .templates import TemplateSet, load_template_set


class PipelineError(Exception):
    pass


class UnapprovedRubric(PipelineError):
    pass


class Phase(str, enum.Enum):
    DRAFTING = "DRAFTING"
    AWAITING_CRITIQUE = "AWAITING_CRITIQUE"
    REVISING = "REVISING"
    PASSED = "PASSED"
    EXHAUSTED = "EXHAUSTED"


class Mode(str, enum.Enum):
    SC = "SC"  # score, then critique cycle
    RO = "RO"  # rubric only, no critic


class AdmissionPolicy(str, enum.Enum):
    MANUAL = "MANUAL"
    AUTO_ON_CONVERGENCE = "AUTO_ON_CONVERGENCE"


_TRANSITIONS = {
    Phase.DRAFTING: {Phase.AWAITING_CRITIQUE, Phase.PASSED},
    Phase.AWAITING_CRITIQUE: {Phase.PASSED, Phase.REVISING},
    Phase.REVISING: {Phase.AWAITING_CRITIQUE, Phase.EXHAUSTED},
    Phase.PASSED: set(),
    Phase.EXHAUSTED: set(),
}

TERMINAL = frozenset({Phase.PASSED, Phase.EXHAUSTED})


@dataclass(frozen=True)
class StaticExemplar:
    """A fixed example shown in every prompt of its kind, independent of retrieval."""

    key: str
    doc: str
    tag: str = ""


def _default_retrieval() -> dict[StoreKind, RetrievalConfig]:
    return {
        StoreKind.RUBRIC_EXEMPLARS: RetrievalConfig(k=1, similarity_threshold=0.7),
        StoreKind.SCORING_EXEMPLARS: RetrievalConfig(k=1, similarity_threshold=0.7),
        StoreKind.CRITIQUE_EXEMPLARS: RetrievalConfig(k=2, similarity_threshold=0.0),
    }


@dataclass(frozen=True)
class PipelineConfig:
    scorer_params: CompletionParams = CompletionParams()
    critic_params: CompletionParams = CompletionParams()
    rubric_gen_params: CompletionParams = CompletionParams()
    retrieval: Mapping[StoreKind, RetrievalConfig] = field(default_factory=_default_retrieval)
    max_critique_iterations: int = 1
    admission_policy: AdmissionPolicy = AdmissionPolicy.MANUAL
    prompt_template_set_id: str = "default"
    static_scoring_exemplars: tuple[StaticExemplar, ...] = ()
    static_critique_exemplars: tuple[StaticExemplar, ...] = ()

    def __post_init__(self) -> None:
        if self.max_critique_iterations < 1:
            raise ValueError("max_critique_iterations must be at least 1; use Mode.RO to skip the critic")
        merged = _default_retrieval()
        merged.update({StoreKind(k): v for k, v in self.retrieval.items()})
        object.__setattr__(self, "retrieval", merged)
        object.__setattr__(self, "admission_policy", AdmissionPolicy(self.admission_policy))
        object.__setattr__(self, "static_scoring_exemplars", tuple(self.static_scoring_exemplars))
        object.__setattr__(self, "static_critique_exemplars", tuple(self.static_critique_exemplars))

    def to_dict(self) -> dict:
        return {
            "scorer_params": self.scorer_params.to_dict(),
            "critic_params": self.critic_params.to_dict(),
            "rubric_gen_params": self.rubric_gen_params.to_dict(),
            "retrieval": {
                k.value: {"k": v.k, "similarity_threshold": v.similarity_threshold, "measure": v.measure.value,
                          "similarity": v.similarity.value}
                for k, v in sorted(self.retrieval.items(), key=lambda kv: kv[0].value)
            },
            "max_critique_iterations": self.max_critique_iterations,
            "admission_policy": self.admission_policy.value,
            "prompt_template_set_id": self.prompt_template_set_id,
            "static_scoring_exemplars": [vars(e) for e in self.static_scoring_exemplars],
            "static_critique_exemplars": [vars(e) for e in self.static_critique_exemplars],
        }


@dataclass
class Stores:
    rubric: ExemplarStore
    scoring: ExemplarStore
    critique: ExemplarStore

    @classmethod
    def empty(cls, embedder: Embedder) -> "Stores":
        return cls(*(ExemplarStore(k, embedder) for k in StoreKind))

    def by_kind(self, kind: StoreKind) -> ExemplarStore:
        return {StoreKind.RUBRIC_EXEMPLARS: self.rubric, StoreKind.SCORING_EXEMPLARS: self.scoring,
                StoreKind.CRITIQUE_EXEMPLARS: self.critique}[StoreKind(kind)]

    def digests(self) -> dict[str, str]:
        return {k.value: self.by_kind(k).digest() for k in StoreKind}


@dataclass
class Providers:
    rubric_gen: Provider
    scorer: Provider
    critic: Provider


@dataclass
class Engine:
    cfg: PipelineConfig
    providers: Providers
    stores: Stores
    embedder: Embedder
    templates: TemplateSet | None = None
    audit: AuditLog | None = None

    def __post_init__(self) -> None:
        if self.templates is None:
            self.templates = load_template_set(self.cfg.prompt_template_set_id)


# -- manifest ---------------------------------------------------------------


@dataclass(frozen=True)
class VersionManifest:
    model_ids: Mapping[str, str]
    template_set_id: str
    template_hash: str
    kb_hashes: Mapping[str, str]
    config_hash: str
    embedder: Mapping[str, object]
    engine_version: str

    def to_dict(self) -> dict:
        return {
            "model_ids": dict(self.model_ids),
            "template_set_id": self.template_set_id,
            "template_hash": self.template_hash,
            "kb_hashes": dict(self.kb_hashes),
            "config_hash": self.config_hash,
            "embedder": dict(self.embedder),
            "engine_version": self.engine_version,
        }

    @property
    def hash(self) -> str:
        return sha256_json(self.to_dict())


def build_manifest(engine: Engine) -> VersionManifest:
    cfg = engine.cfg
    return VersionManifest(
        {"rubric_gen": cfg.rubric_gen_params.model_id, "scorer": cfg.scorer_params.model_id,
         "critic": cfg.critic_params.model_id},
        engine.templates.id,
        engine.templates.digest(),
        engine.stores.digests(),
        sha256_json(cfg.to_dict()),
        engine.embedder.describe(),
        __version__,
    )


# -- helpers ----------------------------------------------------------------


def _call(engine: Engine, rec: Recorder, role: str, purpose: str, transcript: Transcript) -> str:
    provider = {"rubric_gen": engine.providers.rubric_gen, "scorer": engine.providers.scorer,
                "critic": engine.providers.critic}[role]
    params = {"rubric_gen": engine.cfg.rubric_gen_params, "scorer": engine.cfg.scorer_params,
              "critic": engine.cfg.critic_params}[role]
    rec.emit("prompt", {"role": role, "purpose": purpose, "params": params.to_dict(),
                        "messages": transcript.to_list()})
    try:
        msg = complete(provider, transcript, params)
    except ProviderError as exc:
        rec.emit("completion", {"role": role, "purpose": purpose, "error": f"{type(exc).__name__}: {exc}"})
        raise
    rec.emit("completion", {"role": role, "purpose": purpose, "text": msg.content})
    return msg.content


def _log_retrieval(rec: Recorder, store: ExemplarStore, matches: Sequence[Match], selected: Sequence[Match]) -> None:
    rec.emit("retrieval", {
        "store": store.kind.value,
        "size": len(store),
        "approved": store.stats()["approved"],
        "candidates": [{"id": m.entry.id, "score": m.score, "similarity": m.similarity} for m in matches],
        "selected": [m.entry.id for m in selected],
    })


def _system(text: str) -> str:
    return text.lstrip("\n")


def critique_key(draft: ScoreSet, record: RecordText) -> str:
    """Key text under which a (draft, critique) pair is stored and retrieved."""
    return f"{render_scoreset_payload(draft)}\n\n{record.body}"


def _require_approved(rubric: Rubric) -> None:
    if not rubric.approved:
        raise UnapprovedRubric(f"rubric {rubric.id!r} has not been approved by a reviewer")


# -- rubric generation and review -------------------------------------------


def generate_rubric(engine: Engine, domain_note: str, task_description: str) -> tuple[Rubric, list[AuditEvent]]:
    """Draft a rubric, one-shot with the closest approved exemplar if it clears the threshold.

    The proposal is always unapproved. A completion that does not parse
    raises ParseError with the raw completion attached.
    """
    if not task_description.strip():
        raise ValueError("task description must be non-empty")
    rec = Recorder(engine.audit, "rubric-generation")
    t = engine.templates
    store = engine.stores.rubric
    cfg = engine.cfg.retrieval[StoreKind.RUBRIC_EXEMPLARS]
    best = select_exemplar(store, engine.embedder.embed(task_description), cfg) if len(store) else None
    _log_retrieval(rec, store, [best] if best else [], [best] if best else [])
    exemplar = t.render("rubric_exemplar", key=best.entry.key_text, rubric=best.entry.value_doc) if best else ""
    transcript = Transcript.start(
        _system(t.render("rubric_system", domain_note=domain_note)),
        t.render("rubric_user", task_description=task_description, exemplar=exemplar),
    )
    text = _call(engine, rec, "rubric_gen", "rubric", transcript)
    try:
        block = extract_block(text, "rubric")
    except BlockNotFound:
        block = text
    try:
        rubric = parse_rubric(block)
    except ParseError as exc:
        exc.raw = text
        rec.emit("parse_error", {"role": "rubric_gen", "error": str(exc)})
        raise
    except ValidationError as exc:
        rec.emit("parse_error", {"role": "rubric_gen", "error": str(exc)})
        raise
    rubric = replace(rubric, domain_note=rubric.domain_note or domain_note, approved=False)
    rec.emit("parsed", {"kind": "rubric", "rubric": render_rubric(rubric)})
    return rubric, rec.events


class ReviewAction(str, enum.Enum):
    APPROVE = "APPROVE"
    REJECT = "REJECT"


@dataclass(frozen=True)
class Rejection:
    rubric_id: str
    rubric_digest: str
    reason: str = ""


def review_gate(
    proposal: Rubric, decision: Union[ReviewAction, str, Sequence[RubricEdit]], reason: str = ""
) -> Rubric | Rejection:
    """Apply a reviewer's decision: approve, reject, or apply edits in order and approve."""
    if isinstance(decision, (str, ReviewAction)):
        action = ReviewAction(decision)
        if action is ReviewAction.REJECT:
            return Rejection(proposal.id, proposal.digest(), reason)
        return replace(proposal, approved=True)
    edited = apply_edits(proposal, decision)
    return replace(edited, approved=True)


# -- scoring ----------------------------------------------------------------


def _ask_scores(
    engine: Engine, rec: Recorder, transcript: Transcript, rubric: Rubric, record_id: str,
    draft_index: int, purpose: str,
) -> tuple[ScoreSet, Transcript]:
    """One scorer call plus at most one re-ask when the payload is unusable."""
    for attempt in range(2):
        text = _call(engine, rec, "scorer", purpose if attempt == 0 else "reask", transcript)
        transcript = transcript.append(Role.ASSISTANT, text)
        try:
            draft = parse_scoreset_payload(extract_block(text, "scores"), rubric, record_id, draft_index)
        except (ParseError, ValidationError) as exc:
            rec.emit("parse_error", {"role": "scorer", "error": str(exc)})
            if attempt == 1:
                raise
            transcript = transcript.append(Role.USER, engine.templates.render("score_reask", error=str(exc)))
            continue
        rec.emit("parsed", {"kind": "scoreset", "scoreset": scoreset_to_dict(draft)})
        return draft, transcript
    raise AssertionError("unreachable")


def _scoring_exemplars(engine: Engine, rec: Recorder, record: RecordText) -> str:
    t = engine.templates
    parts = [t.render("score_exemplar", text=e.key, scores=e.doc) for e in engine.cfg.static_scoring_exemplars]
    store = engine.stores.scoring
    best = None
    if len(store):
        best = select_exemplar(store, engine.embedder.embed(record.body), engine.cfg.retrieval[StoreKind.SCORING_EXEMPLARS])
    _log_retrieval(rec, store, [best] if best else [], [best] if best else [])
    if best:
        parts.append(t.render("score_exemplar", text=best.entry.key_text, scores=best.entry.value_doc))
    return "".join(parts)


def _initial_draft(engine: Engine, rec: Recorder, record: RecordText, rubric: Rubric) -> tuple[ScoreSet, Transcript]:
    _require_approved(rubric)
    t = engine.templates
    transcript = Transcript.start(
        _system(t.render("score_system", domain_note=rubric.domain_note)),
        t.render("score_user", rubric=render_rubric(rubric), exemplars=_scoring_exemplars(engine, rec, record),
                 record_id=record.id, body=record.body),
    )
    return _ask_scores(engine, rec, transcript, rubric, record.id, 0, "draft")


def score_record(engine: Engine, record: RecordText, rubric: Rubric) -> tuple[ScoreSet, list[AuditEvent]]:
    rec = Recorder(engine.audit, record.id)
    draft, _ = _initial_draft(engine, rec, record, rubric)
    return draft, rec.events


# -- critique cycle ---------------------------------------------------------


@dataclass
class CycleState:
    record_id: str
    mode: Mode = Mode.SC
    phase: Phase = Phase.DRAFTING
    iteration: int = 0
    drafts: list[ScoreSet] = field(default_factory=list)
    critiques: list[Critique] = field(default_factory=list)
    scorer_transcript: Transcript = field(default_factory=Transcript)
    critic_transcript: Transcript = field(default_factory=Transcript)
    trace: list[Phase] = field(default_factory=lambda: [Phase.DRAFTING])

    def advance(self, to: Phase) -> None:
        if to not in _TRANSITIONS[self.phase]:
            raise PipelineError(f"illegal phase transition {self.phase.value} -> {to.value}")
        if to is Phase.PASSED and self.phase is Phase.DRAFTING and self.mode is not Mode.RO:
            raise PipelineError("only rubric-only runs may pass without a critique")
        self.phase = to
        self.trace.append(to)

    @property
    def final(self) -> ScoreSet:
        if not self.drafts:
            raise PipelineError("no draft has been produced")
        return self.drafts[-1]

    @property
    def terminal(self) -> bool:
        return self.phase in TERMINAL

    def violations(self, max_iterations: int) -> list[str]:
        out = []
        if len(self.critiques) > len(self.drafts):
            out.append("more critiques than drafts")
        if self.iteration != len(self.critiques):
            out.append("iteration does not count critiques")
        if len(self.critiques) > max_iterations:
            out.append("critique budget exceeded")
        if self.phase is Phase.PASSED and self.mode is Mode.SC and (
            not self.critiques or self.critiques[-1].verdict is not Verdict.PASS
        ):
            out.append("PASSED without a final PASS verdict")
        if self.phase is Phase.EXHAUSTED and (
            self.iteration != max_iterations or self.critiques[-1].verdict is Verdict.PASS
        ):
            out.append("EXHAUSTED before the budget was spent")
        return out


class CycleError(PipelineError):
    """A cycle failed; ``state`` and ``events`` hold everything up to the failure."""

    def __init__(self, cause: BaseException, state: CycleState, events: list[AuditEvent]):
        super().__init__(f"record {state.record_id}: {type(cause).__name__}: {cause}")
        self.cause = cause
        self.state = state
        self.events = events


def _invalid_spans_section(engine: Engine, draft: ScoreSet, record: RecordText) -> str:
    _, invalid = highlight_spans(draft, record)
    if not invalid:
        return ""
    lines = "\n".join(f"- {h.criterion_name}: [{h.span[0]}, {h.span[1]})" for h in invalid)
    return engine.templates.render("invalid_spans", spans=lines)


def _critique_exemplars(engine: Engine, rec: Recorder, draft: ScoreSet, record: RecordText) -> str:
    t = engine.templates
    parts = [t.render("critic_exemplar", verdict=e.tag or "example", draft=e.key, critique=e.doc)
             for e in engine.cfg.static_critique_exemplars]
    store = engine.stores.critique
    chosen: list[Match] = []
    if len(store):
        cfg = engine.cfg.retrieval[StoreKind.CRITIQUE_EXEMPLARS]
        chosen = top_k_balanced(store, engine.embedder.embed(critique_key(draft, record)), cfg)
    _log_retrieval(rec, store, chosen, chosen)
    for m in chosen:
        parts.append(t.render("critic_exemplar", verdict=m.entry.metadata.get("verdict", "example"),
                              draft=m.entry.key_text, critique=m.entry.value_doc))
    return "".join(parts)


def _ask_critique(engine: Engine, rec: Recorder, transcript: Transcript, rubric: Rubric) -> tuple[Critique, Transcript]:
    for attempt in range(2):
        text = _call(engine, rec, "critic", "critique" if attempt == 0 else "reask", transcript)
        transcript = transcript.append(Role.ASSISTANT, text)
        try:
            critique = parse_critique_payload(extract_block(text, "critique"))
            unknown = check_critique_criteria(critique, rubric)
            if unknown:
                raise ValidationError(unknown)
        except (ParseError, ValidationError) as exc:
            rec.emit("parse_error", {"role": "critic", "error": str(exc)})
            if attempt == 1:
                raise
            transcript = transcript.append(Role.USER, engine.templates.render("critic_reask", error=str(exc)))
            continue
        rec.emit("parsed", {"kind": "critique", "critique": critique_to_dict(critique)})
        return critique, transcript
    raise AssertionError("unreachable")


def _critique(engine: Engine, rec: Recorder, state: CycleState, rubric: Rubric, record: RecordText) -> Critique:
    if state.phase is not Phase.AWAITING_CRITIQUE:
        raise PipelineError(f"cannot critique in phase {state.phase.value}")
    t = engine.templates
    draft = state.drafts[-1]
    exemplars = _critique_exemplars(engine, rec, draft, record)
    spans = _invalid_spans_section(engine, draft, record)
    if not state.critic_transcript.messages:
        transcript = Transcript.start(
            _system(t.render("critic_system", domain_note=rubric.domain_note)),
            t.render("critic_user", rubric=render_rubric(rubric), exemplars=exemplars, record_id=record.id,
                     body=record.body, draft=render_scoreset_payload(draft), invalid_spans=spans),
        )
    else:
        transcript = state.critic_transcript.append(Role.USER, t.render(
            "critic_followup", exemplars=exemplars, index=draft.draft_index,
            draft=render_scoreset_payload(draft), invalid_spans=spans,
        ))
    critique, state.critic_transcript = _ask_critique(engine, rec, transcript, rubric)
    state.critiques.append(critique)
    state.iteration += 1
    state.advance(Phase.PASSED if critique.verdict is Verdict.PASS else Phase.REVISING)
    return critique


def critique_scores(
    engine: Engine, state: CycleState, rubric: Rubric, record: RecordText
) -> tuple[Critique, list[AuditEvent]]:
    """Have the critic review the latest draft; updates ``state`` in place."""
    if not state.drafts:
        raise PipelineError("nothing to critique")
    rec = Recorder(engine.audit, record.id)
    return _critique(engine, rec, state, rubric, record), rec.events


def _revise(engine: Engine, rec: Recorder, state: CycleState, rubric: Rubric) -> ScoreSet:
    if state.phase is not Phase.REVISING or not state.critiques or state.critiques[-1].verdict is not Verdict.REVISE:
        raise PipelineError("revision needs a REVISE critique")
    prior = state.drafts[-1]
    transcript = state.scorer_transcript.append(Role.USER, engine.templates.render(
        "revise_user", critique=render_critique_payload(state.critiques[-1])))
    draft, state.scorer_transcript = _ask_scores(
        engine, rec, transcript, rubric, state.record_id, prior.draft_index + 1, "revision")
    if draft.entries == prior.entries:
        rec.emit("no_change", {"draft_index": draft.draft_index})
    state.drafts.append(draft)
    if state.iteration >= engine.cfg.max_critique_iterations:
        state.advance(Phase.EXHAUSTED)
    else:
        state.advance(Phase.AWAITING_CRITIQUE)
    return draft


def revise_scores(engine: Engine, state: CycleState, rubric: Rubric) -> tuple[ScoreSet, list[AuditEvent]]:
    """Feed the last critique back to the scorer; updates ``state`` in place."""
    rec = Recorder(engine.audit, state.record_id)
    return _revise(engine, rec, state, rubric), rec.events


def run_critique_cycle(
    engine: Engine, record: RecordText, rubric: Rubric, mode: Mode = Mode.SC
) -> tuple[ScoreSet, CycleState, list[AuditEvent]]:
    """Draft, then critique and revise until PASS or the critique budget is spent.

    With ``max_critique_iterations=1`` there is one critique and at most
    one revision. ``Mode.RO`` returns the first draft without a critic.
    On failure a :class:`CycleError` carries the partial state.
    """
    mode = Mode(mode)
    rec = Recorder(engine.audit, record.id)
    state = CycleState(record.id, mode)
    try:
        draft, state.scorer_transcript = _initial_draft(engine, rec, record, rubric)
        state.drafts.append(draft)
        if mode is Mode.RO:
            state.advance(Phase.PASSED)
        else:
            state.advance(Phase.AWAITING_CRITIQUE)
            while not state.terminal:
                if state.phase is Phase.AWAITING_CRITIQUE:
                    _critique(engine, rec, state, rubric, record)
                else:
                    _revise(engine, rec, state, rubric)
    except Exception as exc:
        rec.emit("error", {"phase": state.phase.value, "error": f"{type(exc).__name__}: {exc}"})
        raise CycleError(exc, state, rec.events) from exc
    rec.emit("decision", {
        "phase": state.phase.value, "mode": mode.value, "drafts": len(state.drafts),
        "critiques": len(state.critiques), "weighted_total": str(state.final.weighted_total),
    })
    return state.final, state, rec.events


# -- knowledge-base admission -----------------------------------------------


@dataclass(frozen=True)
class Proposal:
    kind: StoreKind
    key_text: str
    value_doc: str
    approved: bool
    metadata: Mapping[str, str] = field(default_factory=dict)


def decide_admission(state: CycleState, record: RecordText, policy: AdmissionPolicy) -> list[Proposal]:
    """Candidate knowledge-base additions for a finished cycle.

    MANUAL proposes everything unapproved for a reviewer. AUTO admits,
    approved, only critic-verified runs that passed within budget.
    """
    if not state.terminal:
        raise PipelineError("admission needs a finished cycle")
    policy = AdmissionPolicy(policy)
    if policy is AdmissionPolicy.AUTO_ON_CONVERGENCE:
        if state.phase is not Phase.PASSED or state.mode is not Mode.SC:
            return []
        approved = True
    else:
        approved = False
    base = {"record_id": record.id, "phase": state.phase.value, "mode": state.mode.value}
    out = [Proposal(StoreKind.SCORING_EXEMPLARS, record.body, render_scoreset_payload(state.final), approved,
                    {**base, "drafts": str(len(state.drafts))})]
    for draft, critique in zip(state.drafts, state.critiques):
        out.append(Proposal(
            StoreKind.CRITIQUE_EXEMPLARS, critique_key(draft, record), render_critique_payload(critique), approved,
            {**base, "draft_index": str(draft.draft_index), "verdict": critique.verdict.value.lower()},
        ))
    return out


def admit(proposals: Sequence[Proposal], stores: Stores) -> list[str]:
    return [
        stores.by_kind(p.kind).add_entry(p.key_text, p.value_doc, approved=p.approved, metadata=p.metadata)
        for p in proposals
    ]
