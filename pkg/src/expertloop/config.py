"""Run configuration: file + environment + flag layering, and run assembly.

Precedence: explicit flags beat environment variables beat the config file
beat built-in defaults. ``build_run`` turns a validated config into the
concrete state/provider/oracle/policy quadruple the loop consumes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .errors import ConfigInvalid
from .guidance import QueryKind, cost_table_from_raw
from .harness import CountingProvider, GuidedPolicy, RandomPolicy, RunState, UncertaintyPolicy
from .integrate import IntegrationParams
from .kr import ScoringParams, load_seed_items
from .llm import HttpProvider, HttpProviderConfig, ScriptedProvider
from .mockllm import RuleDomainProvider
from .oracle import HumanOracle, HumanOracleQueue, LLMOracle, ScriptedOracle, ScriptedOracleTable
from .prompts import load_cost_table, load_persona, load_questions, load_questions_file, load_templates
from .stream import Instance, LabelSpace, PhaseSpec, load_stream, phase_for, validate_phases

ENV_PREFIX = "EXPERTLOOP_"

# Config keys that may be overridden via environment variables.
_ENV_KEYS = {
    "budget": int,
    "cost_mode": str,
    "seed": int,
    "llm": str,
    "oracle": str,
    "policy": str,
    "token": str,
    "llm_base_url": str,
    "llm_model": str,
    "llm_api_token": str,
}


@dataclass(frozen=True)
class RunConfig:
    stream_path: str
    budget: int = 0
    cost_mode: str = "uniform"  # uniform | cuad | custom-file
    cost_file: Optional[str] = None
    seed: int = 0
    llm: str = "mock"  # mock | script:<path> | http
    oracle: str = "scripted"  # scripted | llm | human
    policy: str = "guided"  # guided | random | uncertainty
    random_rate: float = 0.1
    uncertainty_theta: float = 0.5
    truth_path: Optional[str] = None
    oracle_pack_path: Optional[str] = None
    labels: tuple[str, ...] = ("Match", "Non-Match")
    default_label: Optional[str] = None
    metrics_mode: str = "binary"
    # scoring
    w_po: float = 0.5
    decay_per_day: float = 0.01
    tau_score: float = 0.0
    n_top: int = 5
    retrieval_mode: str = "top_n"
    # similarity / integration
    tau_sim: float = 0.40
    conflict_resolution: bool = True
    embedder_endpoint: Optional[str] = None  # remote embedder; fallback embedder when unset
    embedder_dim: int = 0
    allowed_query_kinds: Optional[tuple[str, ...]] = None
    # misc
    question_set: str = "default"  # default | path to a file
    prompt_version: str = "v1"
    kr0_path: Optional[str] = None
    log_path: Optional[str] = None
    checkpoint_every: int = 50
    aht_mode: str = "simulated"  # simulated (fixed per-call costs) | wall (clock time)
    phases: tuple[dict, ...] = ()
    human_timeout_s: float = 600.0
    run_id: str = "run"
    # http provider knobs
    llm_base_url: Optional[str] = None
    llm_model: Optional[str] = None
    llm_api_token: Optional[str] = None
    token: Optional[str] = None  # service auth token

    def validate(self) -> "RunConfig":
        if self.budget < 0:
            raise ConfigInvalid("budget must be non-negative")
        if self.cost_mode not in ("uniform", "cuad", "custom-file"):
            raise ConfigInvalid(f"unknown cost mode {self.cost_mode!r}")
        if self.cost_mode == "custom-file" and not self.cost_file:
            raise ConfigInvalid("cost-mode custom-file needs cost_file")
        if self.oracle not in ("scripted", "llm", "human"):
            raise ConfigInvalid(f"unknown oracle kind {self.oracle!r}")
        if self.policy not in ("guided", "random", "uncertainty"):
            raise ConfigInvalid(f"unknown policy {self.policy!r}")
        if not (self.llm in ("mock", "http") or self.llm.startswith("script:")):
            raise ConfigInvalid(f"unknown llm provider {self.llm!r}")
        if self.oracle in ("scripted", "llm") and not self.truth_path:
            raise ConfigInvalid(f"oracle {self.oracle!r} needs truth_path")
        if len(self.labels) < 2:
            raise ConfigInvalid("need at least two labels")
        if not (0.0 <= self.w_po <= 1.0):
            raise ConfigInvalid("w_po must lie in [0, 1]")
        if self.decay_per_day < 0:
            raise ConfigInvalid("decay_per_day must be >= 0")
        if not (0.0 <= self.tau_sim <= 1.0):
            raise ConfigInvalid("tau_sim must lie in [0, 1]")
        if self.n_top < 1:
            raise ConfigInvalid("n_top must be >= 1")
        if self.allowed_query_kinds is not None:
            valid = {k.value for k in QueryKind}
            unknown = set(self.allowed_query_kinds) - valid
            if unknown:
                raise ConfigInvalid(f"unknown query kinds: {sorted(unknown)}")
        if self.embedder_endpoint and self.embedder_dim < 1:
            raise ConfigInvalid("a remote embedder needs embedder_dim")
        if self.aht_mode not in ("simulated", "wall"):
            raise ConfigInvalid(f"unknown aht mode {self.aht_mode!r}")
        return self


def _coerce(value, target_type):
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    return value


def load_config(
    path: Optional[str] = None,
    env: Optional[dict[str, str]] = None,
    overrides: Optional[dict] = None,
) -> RunConfig:
    """Layer file, environment, and flag values into a validated RunConfig."""
    raw: dict = {}
    if path:
        try:
            raw.update(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalid(f"cannot read config file {path}: {exc}") from exc
    env = dict(os.environ if env is None else env)
    for key, target_type in _ENV_KEYS.items():
        env_name = ENV_PREFIX + key.upper()
        if env_name in env:
            try:
                raw[key] = _coerce(env[env_name], target_type)
            except ValueError as exc:
                raise ConfigInvalid(f"bad env value for {env_name}: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    for tuple_key in ("labels", "allowed_query_kinds", "phases"):
        if tuple_key in raw and raw[tuple_key] is not None and not isinstance(raw[tuple_key], tuple):
            raw[tuple_key] = tuple(raw[tuple_key])
    if "stream_path" not in raw:
        raise ConfigInvalid("stream_path is required")
    known = {f.name for f in RunConfig.__dataclass_fields__.values()}
    unknown = set(raw) - known
    if unknown:
        raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
    try:
        config = RunConfig(**raw)
    except TypeError as exc:
        raise ConfigInvalid(f"bad config: {exc}") from exc
    return config.validate()


@dataclass
class AssembledRun:
    config: RunConfig
    state: RunState
    stream: list[Instance]
    llm: CountingProvider
    oracle: object
    policy: object
    human_queue: Optional[HumanOracleQueue] = None


def build_cost_table(config: RunConfig) -> dict[QueryKind, int]:
    if config.cost_mode == "custom-file":
        try:
            raw = json.loads(Path(config.cost_file).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalid(f"cannot read cost file {config.cost_file}: {exc}") from exc
        return cost_table_from_raw(raw)
    return cost_table_from_raw(load_cost_table(config.prompt_version, config.cost_mode))


def build_llm(config: RunConfig) -> CountingProvider:
    if config.llm == "mock":
        return CountingProvider(RuleDomainProvider())
    if config.llm.startswith("script:"):
        return CountingProvider(ScriptedProvider.from_file(config.llm.split(":", 1)[1]))
    base_url = config.llm_base_url or os.environ.get("LLM_BASE_URL")
    model = config.llm_model or os.environ.get("LLM_MODEL")
    if not base_url or not model:
        raise ConfigInvalid("http llm needs llm_base_url and llm_model (flag, file, or env)")
    token = config.llm_api_token or os.environ.get("LLM_API_TOKEN")
    return CountingProvider(HttpProvider(HttpProviderConfig(base_url=base_url, model=model, api_token=token)))


def build_run(config: RunConfig, run_id: Optional[str] = None) -> AssembledRun:
    config = config.validate()
    run_id = run_id or config.run_id
    stream = load_stream(config.stream_path)
    phases = [PhaseSpec.from_dict(p) for p in config.phases] if config.phases else []
    if phases:
        validate_phases(phases)
    templates = load_templates(config.prompt_version)
    questions = (
        load_questions(config.prompt_version)
        if config.question_set == "default"
        else load_questions_file(config.question_set)
    )
    cost_table = build_cost_table(config)
    label_space = LabelSpace(labels=tuple(config.labels), default_label=config.default_label)
    scoring = ScoringParams.from_config(
        w_po=config.w_po,
        decay_per_day=config.decay_per_day,
        tau_score=config.tau_score,
        n_top=config.n_top,
        mode=config.retrieval_mode,
    )
    integration = IntegrationParams(tau_sim=config.tau_sim, conflict_resolution=config.conflict_resolution)
    allowed = (
        tuple(QueryKind(k) for k in config.allowed_query_kinds)
        if config.allowed_query_kinds
        else None
    )
    embed = None
    if config.embedder_endpoint:
        from .similarity import EmbeddingCache, RemoteEmbedder

        embed = EmbeddingCache(RemoteEmbedder(config.embedder_endpoint, config.embedder_dim))
    state = RunState.create(
        run_id=run_id,
        label_space=label_space,
        budget=config.budget,
        cost_table=cost_table,
        scoring=scoring,
        integration=integration,
        templates=templates,
        questions=questions,
        log_path=config.log_path,
        phases=phases,
        allowed_kinds=allowed,
        checkpoint_every=config.checkpoint_every,
        metrics_mode=config.metrics_mode,
        seed=config.seed,
        embed=embed,
        aht_mode=config.aht_mode,
    )
    if config.kr0_path:
        entries = []
        with open(config.kr0_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    entries.append(json.loads(line))
        start_ts = stream[0].ts if stream else 0
        load_seed_items(state.kr, entries, now=start_ts)

    llm = build_llm(config)

    human_queue = None
    if config.oracle == "human":
        human_queue = HumanOracleQueue()
        oracle = HumanOracle(human_queue, timeout_s=config.human_timeout_s)
    else:
        table = ScriptedOracleTable.load(config.truth_path, config.oracle_pack_path)
        if config.oracle == "scripted":
            oracle = ScriptedOracle(table)
        else:
            version_fn = (
                (lambda ordinal: phase_for(phases, ordinal).oracle_prompt_version)
                if phases
                else (lambda ordinal: "v1")
            )
            oracle = LLMOracle(llm, table.truth, templates, load_persona(config.prompt_version), version_fn)

    if config.policy == "guided":
        policy = GuidedPolicy(llm)
    elif config.policy == "random":
        policy = RandomPolicy(rate=config.random_rate, seed=config.seed)
    else:
        policy = UncertaintyPolicy(llm, theta=config.uncertainty_theta)

    return AssembledRun(
        config=config,
        state=state,
        stream=stream,
        llm=llm,
        oracle=oracle,
        policy=policy,
        human_queue=human_queue,
    )
