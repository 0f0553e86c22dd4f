"""Model registry: descriptors, versions, capability queries, update cycles.

Descriptors travel as JSON documents (`.model.json`). Parsing is strict about
the declared field set but never drops what it does not understand: unknown
keys are kept in per-object extras maps and serialized back out, so two sides
running different descriptor generations can keep talking. The JSON schema
for the document lives in docs/model-descriptor.schema.json.

The registry announces every registration and version bump as a model-update
envelope on registry/<modelId> when a fabric is attached; learning
contributions buffer until the configured update cycle length is reached and
then bump the patch version.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum

from .errors import (
    BadQuery,
    BadValue,
    DescriptorParseError,
    DuplicateModelVersion,
    MissingField,
    UnknownModel,
)
from .fabric import KIND_MODEL_UPDATE, Fabric, MessageEnvelope


@dataclass(frozen=True, order=True)
class Version:
    """Three-part semantic version."""

    major: int
    minor: int
    patch: int

    @classmethod
    def parse(cls, text: str) -> Version:
        parts = text.split(".")
        if len(parts) != 3 or not all(p.isdigit() for p in parts):
            raise ValueError(f"not a three-part version: {text!r}")
        return cls(int(parts[0]), int(parts[1]), int(parts[2]))

    def bump(self, part: str) -> Version:
        """Increment one part, resetting the lower ones."""
        if part == "major":
            return Version(self.major + 1, 0, 0)
        if part == "minor":
            return Version(self.major, self.minor + 1, 0)
        if part == "patch":
            return Version(self.major, self.minor, self.patch + 1)
        raise ValueError(f"unknown version part {part!r}")

    def render(self) -> str:
        return f"{self.major}.{self.minor}.{self.patch}"


class ModelCategory(str, Enum):
    FOUNDATION = "Foundation"
    SPECIALIZED = "Specialized"
    HYBRID = "Hybrid"
    CONTROLLER = "Controller"


@dataclass(frozen=True)
class Capability:
    """One named capability with free-form string parameters."""

    name: str
    params: dict[str, str] = field(default_factory=dict)
    extras: dict[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class Architecture:
    family: str
    parameter_scale_label: str
    custom_elements: tuple[str, ...] = ()
    extras: dict[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class Performance:
    rate_limit_per_tick: int
    latency_ticks: int
    throughput_per_tick: int
    max_concurrent: int
    extras: dict[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class Security:
    auth_methods: tuple[str, ...]
    encryption: tuple[str, ...]
    privacy_policy: str
    extras: dict[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class ModelDescriptor:
    """Everything the interconnect knows about one model version."""

    model_id: str
    model_type: str
    version: Version
    category: ModelCategory
    architecture: Architecture
    capabilities: tuple[Capability, ...]
    domains: tuple[str, ...] = ()
    hyperparameters: dict[str, object] = field(default_factory=dict)
    performance: Performance = Performance(1, 1, 1, 1)
    security: Security = Security((), (), "unspecified")
    extras: dict[str, object] = field(default_factory=dict)

    def capability_names(self) -> frozenset[str]:
        return frozenset(c.name for c in self.capabilities)

    def capability(self, name: str) -> Capability | None:
        for cap in self.capabilities:
            if cap.name == name:
                return cap
        return None


def _require(obj: dict, key: str, path: str):
    if key not in obj:
        raise MissingField(f"{path}{key}")
    return obj[key]


def _expect_str(value, path: str) -> str:
    if not isinstance(value, str) or not value:
        raise BadValue(path, "expected a non-empty string")
    return value


def _expect_str_list(value, path: str) -> tuple[str, ...]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise BadValue(path, "expected a list of strings")
    return tuple(value)


def _split_extras(obj: dict, known: set[str]) -> dict[str, object]:
    return {k: obj[k] for k in obj if k not in known}


def _parse_architecture(obj, path: str) -> Architecture:
    if not isinstance(obj, dict):
        raise BadValue(path, "expected an object")
    family = _expect_str(_require(obj, "family", f"{path}."), f"{path}.family")
    label = _expect_str(
        _require(obj, "parameterScaleLabel", f"{path}."), f"{path}.parameterScaleLabel"
    )
    custom = _expect_str_list(obj.get("customElements", []), f"{path}.customElements")
    extras = _split_extras(obj, {"family", "parameterScaleLabel", "customElements"})
    return Architecture(family, label, custom, extras)


def _parse_performance(obj, path: str) -> Performance:
    if not isinstance(obj, dict):
        raise BadValue(path, "expected an object")
    values = {}
    for key in ("rateLimitPerTick", "latencyTicks", "throughputPerTick", "maxConcurrent"):
        raw = _require(obj, key, f"{path}.")
        if not isinstance(raw, int) or isinstance(raw, bool) or raw <= 0:
            raise BadValue(f"{path}.{key}", "expected a positive integer")
        values[key] = raw
    extras = _split_extras(
        obj, {"rateLimitPerTick", "latencyTicks", "throughputPerTick", "maxConcurrent"}
    )
    return Performance(
        values["rateLimitPerTick"],
        values["latencyTicks"],
        values["throughputPerTick"],
        values["maxConcurrent"],
        extras,
    )


def _parse_security(obj, path: str) -> Security:
    if not isinstance(obj, dict):
        raise BadValue(path, "expected an object")
    auth = _expect_str_list(_require(obj, "authMethods", f"{path}."), f"{path}.authMethods")
    enc = _expect_str_list(_require(obj, "encryption", f"{path}."), f"{path}.encryption")
    policy = _expect_str(_require(obj, "privacyPolicy", f"{path}."), f"{path}.privacyPolicy")
    extras = _split_extras(obj, {"authMethods", "encryption", "privacyPolicy"})
    return Security(auth, enc, policy, extras)


def _parse_capability(obj, path: str) -> Capability:
    if not isinstance(obj, dict):
        raise BadValue(path, "expected an object")
    name = _expect_str(_require(obj, "name", f"{path}."), f"{path}.name")
    params_raw = obj.get("params", {})
    if not isinstance(params_raw, dict):
        raise BadValue(f"{path}.params", "expected an object of string values")
    params = {}
    for key, value in params_raw.items():
        if not isinstance(value, str):
            raise BadValue(f"{path}.params.{key}", "expected a string value")
        params[key] = value
    extras = _split_extras(obj, {"name", "params"})
    return Capability(name, params, extras)


_TOP_LEVEL_KEYS = {
    "modelId",
    "modelType",
    "version",
    "category",
    "architecture",
    "hyperparameters",
    "capabilities",
    "domains",
    "performance",
    "security",
}


def parse_descriptor(document: bytes | str) -> ModelDescriptor:
    """Parse a descriptor document; unknown keys survive in extras maps."""
    text = document.decode("utf-8") if isinstance(document, bytes) else document
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DescriptorParseError(str(exc), position=exc.pos) from exc
    if not isinstance(obj, dict):
        raise DescriptorParseError("descriptor document must be a JSON object")

    model_id = _expect_str(_require(obj, "modelId", ""), "modelId")
    model_type = _expect_str(_require(obj, "modelType", ""), "modelType")
    version_raw = _expect_str(_require(obj, "version", ""), "version")
    try:
        version = Version.parse(version_raw)
    except ValueError as exc:
        raise BadValue("version", str(exc)) from exc
    category_raw = _expect_str(_require(obj, "category", ""), "category")
    try:
        category = ModelCategory(category_raw)
    except ValueError as exc:
        raise BadValue("category", f"unknown category {category_raw!r}") from exc

    architecture = _parse_architecture(_require(obj, "architecture", ""), "architecture")
    caps_raw = _require(obj, "capabilities", "")
    if not isinstance(caps_raw, list):
        raise BadValue("capabilities", "expected a list")
    capabilities = tuple(
        _parse_capability(c, f"capabilities[{i}]") for i, c in enumerate(caps_raw)
    )
    names = [c.name for c in capabilities]
    if len(names) != len(set(names)):
        raise BadValue("capabilities", "capability names must be unique")
    domains = _expect_str_list(obj.get("domains", []), "domains")
    hyper = obj.get("hyperparameters", {})
    if not isinstance(hyper, dict):
        raise BadValue("hyperparameters", "expected an object")
    performance = _parse_performance(_require(obj, "performance", ""), "performance")
    security = _parse_security(_require(obj, "security", ""), "security")
    extras = _split_extras(obj, _TOP_LEVEL_KEYS)

    return ModelDescriptor(
        model_id=model_id,
        model_type=model_type,
        version=version,
        category=category,
        architecture=architecture,
        capabilities=capabilities,
        domains=domains,
        hyperparameters=dict(hyper),
        performance=performance,
        security=security,
        extras=extras,
    )


def serialize_descriptor(descriptor: ModelDescriptor) -> bytes:
    """Emit the canonical document; parse(serialize(parse(d))) == parse(d)."""
    arch: dict[str, object] = {
        "family": descriptor.architecture.family,
        "parameterScaleLabel": descriptor.architecture.parameter_scale_label,
        "customElements": list(descriptor.architecture.custom_elements),
    }
    arch.update(descriptor.architecture.extras)
    perf: dict[str, object] = {
        "rateLimitPerTick": descriptor.performance.rate_limit_per_tick,
        "latencyTicks": descriptor.performance.latency_ticks,
        "throughputPerTick": descriptor.performance.throughput_per_tick,
        "maxConcurrent": descriptor.performance.max_concurrent,
    }
    perf.update(descriptor.performance.extras)
    sec: dict[str, object] = {
        "authMethods": list(descriptor.security.auth_methods),
        "encryption": list(descriptor.security.encryption),
        "privacyPolicy": descriptor.security.privacy_policy,
    }
    sec.update(descriptor.security.extras)
    caps = []
    for cap in descriptor.capabilities:
        entry: dict[str, object] = {"name": cap.name, "params": dict(cap.params)}
        entry.update(cap.extras)
        caps.append(entry)
    doc: dict[str, object] = {
        "modelId": descriptor.model_id,
        "modelType": descriptor.model_type,
        "version": descriptor.version.render(),
        "category": descriptor.category.value,
        "architecture": arch,
        "hyperparameters": descriptor.hyperparameters,
        "capabilities": caps,
        "domains": list(descriptor.domains),
        "performance": perf,
        "security": sec,
    }
    doc.update(descriptor.extras)
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8")


@dataclass
class _ModelEntry:
    versions: dict[str, ModelDescriptor] = field(default_factory=dict)
    latest: Version | None = None
    learning_buffer: list[tuple[str, str]] = field(default_factory=list)  # (envelope id, objective)


class ModelRegistry:
    """Versioned store of model descriptors with capability lookup."""

    def __init__(self, fabric: Fabric | None = None, update_cycle_len: int = 1):
        if update_cycle_len < 1:
            raise ValueError("update_cycle_len must be at least 1")
        self._entries: dict[str, _ModelEntry] = {}
        self._fabric = fabric
        self.update_cycle_len = update_cycle_len
        if fabric is not None:
            fabric.registry = self

    def _announce(self, descriptor: ModelDescriptor, reason: str) -> None:
        if self._fabric is None:
            return
        topic = f"registry/{descriptor.model_id}"
        self._fabric.create_topic(topic, scope="shared")
        envelope = self._fabric.envelope(
            topic,
            serialize_descriptor(descriptor),
            kind=KIND_MODEL_UPDATE,
            session=f"model-{descriptor.model_id}",
            origin="registry",
            model_id=descriptor.model_id,
            detail=f"{reason} {descriptor.model_id}@{descriptor.version.render()}",
        )
        self._fabric.publish(envelope)

    def register(self, descriptor: ModelDescriptor) -> str:
        """Add a descriptor version; announces it when a fabric is attached."""
        entry = self._entries.setdefault(descriptor.model_id, _ModelEntry())
        key = descriptor.version.render()
        if key in entry.versions:
            raise DuplicateModelVersion(f"{descriptor.model_id}@{key} already registered")
        entry.versions[key] = descriptor
        if entry.latest is None or descriptor.version > entry.latest:
            entry.latest = descriptor.version
        reason = "register" if len(entry.versions) == 1 else "update"
        self._announce(descriptor, reason)
        return descriptor.model_id

    def has_model(self, model_id: str) -> bool:
        return model_id in self._entries

    def get(self, model_id: str, version: str | None = None) -> ModelDescriptor:
        """Fetch one version (default: latest); raises UnknownModel."""
        entry = self._entries.get(model_id)
        if entry is None or entry.latest is None:
            raise UnknownModel(f"no model registered as {model_id!r}")
        if version is None:
            return entry.versions[entry.latest.render()]
        if version not in entry.versions:
            raise UnknownModel(f"{model_id!r} has no version {version}")
        return entry.versions[version]

    def versions(self, model_id: str) -> list[str]:
        entry = self._entries.get(model_id)
        if entry is None:
            raise UnknownModel(f"no model registered as {model_id!r}")
        return sorted(entry.versions, key=Version.parse)

    def model_ids(self) -> list[str]:
        return sorted(self._entries)

    def query_by_capability(
        self, required: set[str] | frozenset[str], domain_hint: str | None = None
    ) -> list[ModelDescriptor]:
        """Latest versions whose capability names cover `required`.

        Ordering: domain-hint matches first, then ascending latencyTicks,
        then model id. Pure read.
        """
        if not required:
            raise BadQuery("required capability set must be non-empty")
        needed = frozenset(required)
        matches = []
        for model_id in sorted(self._entries):
            entry = self._entries[model_id]
            if entry.latest is None:
                continue
            descriptor = entry.versions[entry.latest.render()]
            if needed <= descriptor.capability_names():
                matches.append(descriptor)
        matches.sort(
            key=lambda d: (
                0 if (domain_hint is not None and domain_hint in d.domains) else 1,
                d.performance.latency_ticks,
                d.model_id,
            )
        )
        return matches

    def bump_version(self, model_id: str, part: str) -> Version:
        """Clone the latest descriptor under an incremented version."""
        latest = self.get(model_id)
        bumped = latest.version.bump(part)
        entry = self._entries[model_id]
        key = bumped.render()
        if key in entry.versions:
            raise DuplicateModelVersion(f"{model_id}@{key} already registered")
        descriptor = replace(latest, version=bumped)
        entry.versions[key] = descriptor
        entry.latest = bumped
        self._announce(descriptor, "update")
        return bumped

    def contribute_learning(
        self, model_id: str, data: MessageEnvelope, objective: str
    ) -> int:
        """Buffer a learning contribution; bump patch when the cycle fills.

        Returns how many contributions remain before the next update.
        """
        entry = self._entries.get(model_id)
        if entry is None or entry.latest is None:
            raise UnknownModel(f"no model registered as {model_id!r}")
        entry.learning_buffer.append((data.id, objective))
        if len(entry.learning_buffer) >= self.update_cycle_len:
            entry.learning_buffer.clear()
            self.bump_version(model_id, "patch")
            return 0
        return self.update_cycle_len - len(entry.learning_buffer)

    def pending_contributions(self, model_id: str) -> int:
        entry = self._entries.get(model_id)
        if entry is None:
            raise UnknownModel(f"no model registered as {model_id!r}")
        return len(entry.learning_buffer)
