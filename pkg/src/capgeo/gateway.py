"""Provider-neutral chat completion with caching, retry and bounded batches."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol, Sequence, Union

logger = logging.getLogger(__name__)

FINISH_REASONS = ("stop", "length", "error")


class GatewayError(Exception):
    """Base class for provider and cache failures."""


class TransportError(GatewayError):
    """Network-level or server-side failure; retried."""


class RateLimitError(TransportError):
    pass


class ProviderRejection(GatewayError):
    """Non-retryable refusal, e.g. an invalid request or content policy."""


class MalformedResponse(GatewayError):
    pass


class CacheIOError(GatewayError):
    pass


class ConfigError(GatewayError):
    pass


# --------------------------------------------------------------------------
# Requests


@dataclass(frozen=True)
class Message:
    role: str
    text: str
    image: Optional[str] = None  # content digest

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class Decoding:
    temperature: float = 0.0
    max_output_tokens: int = 2048
    seed: Optional[int] = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")


@dataclass(frozen=True)
class ChatRequest:
    provider: str
    model: str
    messages: tuple[Message, ...]
    decoding: Decoding = field(default_factory=Decoding)

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("messages must be nonempty")

    @property
    def images(self) -> list[str]:
        return [m.image for m in self.messages if m.image is not None]

    def to_dict(self) -> dict:
        return {
            "provider": self.provider,
            "model": self.model,
            "messages": [
                {"role": m.role, "text": m.text, "image": m.image} for m in self.messages
            ],
            "decoding": {
                "temperature": self.decoding.temperature,
                "max_output_tokens": self.decoding.max_output_tokens,
                "seed": self.decoding.seed,
            },
        }


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def cache_key(req: ChatRequest) -> str:
    """SHA-256 fingerprint of the full request, image digests included."""
    return hashlib.sha256(canonical_json(req.to_dict())).hexdigest()


# --------------------------------------------------------------------------
# Responses


@dataclass(frozen=True)
class Provenance:
    cache_hit: bool = False
    attempts: int = 0
    wall_ms: float = 0.0


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: str = "stop"
    usage: Mapping[str, int] = field(default_factory=dict)
    provenance: Provenance = field(default_factory=Provenance)
    error: Optional[str] = None

    def __post_init__(self):
        if self.finish_reason not in FINISH_REASONS:
            raise MalformedResponse(f"unknown finish reason {self.finish_reason!r}")

    @property
    def ok(self) -> bool:
        return self.finish_reason != "error"

    def payload(self) -> bytes:
        """The cached representation; provenance is deliberately excluded."""
        return canonical_json({
            "text": self.text,
            "finish_reason": self.finish_reason,
            "usage": dict(self.usage),
        })

    @classmethod
    def from_payload(cls, data: bytes, provenance: Provenance | None = None) -> "ChatResponse":
        try:
            obj = json.loads(data.decode("utf-8"))
            return cls(
                text=obj["text"],
                finish_reason=obj["finish_reason"],
                usage=obj.get("usage", {}),
                provenance=provenance or Provenance(),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedResponse(f"bad cached payload: {exc}") from exc

    @classmethod
    def failure(cls, error: BaseException, attempts: int = 0) -> "ChatResponse":
        return cls(
            text="",
            finish_reason="error",
            provenance=Provenance(attempts=attempts),
            error=f"{type(error).__name__}: {error}",
        )


# --------------------------------------------------------------------------
# Storage


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


class ContentStore:
    """Immutable blobs under ``root/<sha256>``."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def put(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        path = self.path(digest)
        if not path.exists():
            _atomic_write(path, data)
        return digest

    def put_file(self, path: Union[str, Path]) -> str:
        return self.put(Path(path).read_bytes())

    def path(self, digest: str) -> Path:
        return self.root / digest

    def __contains__(self, digest: str) -> bool:
        return self.path(digest).is_file()

    def get(self, digest: str) -> bytes:
        try:
            return self.path(digest).read_bytes()
        except FileNotFoundError:
            raise KeyError(digest) from None


class ResponseCache:
    """Response payloads under ``root/<2-hex-prefix>/<fingerprint>.resp``."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def path(self, fingerprint: str) -> Path:
        return self.root / fingerprint[:2] / f"{fingerprint}.resp"

    def get(self, fingerprint: str) -> Optional[bytes]:
        try:
            return self.path(fingerprint).read_bytes()
        except FileNotFoundError:
            return None
        except OSError as exc:
            raise CacheIOError(str(exc)) from exc

    def put(self, fingerprint: str, data: bytes) -> None:
        try:
            _atomic_write(self.path(fingerprint), data)
        except OSError as exc:
            raise CacheIOError(str(exc)) from exc


# --------------------------------------------------------------------------
# Providers


@dataclass(frozen=True)
class Completion:
    text: str
    finish_reason: str = "stop"
    usage: Mapping[str, int] = field(default_factory=dict)


class Provider(Protocol):
    def complete(self, request: ChatRequest, images: Mapping[str, bytes]) -> Completion:
        ...


Responder = Callable[[ChatRequest], str]


def _estimate_usage(request: ChatRequest, text: str) -> dict:
    prompt = sum(len(m.text.split()) for m in request.messages)
    return {"prompt_tokens": prompt, "completion_tokens": len(text.split())}


def echo_responder(request: ChatRequest) -> str:
    """Deterministic fallback reply derived from the request fingerprint."""
    fp = cache_key(request)
    letter = "ABCD"[int(fp[:8], 16) % 4]
    return f"mock reply {fp[:12]}. The answer is ({letter})."


class MockProvider:
    """Offline provider for tests and dry runs.

    ``replies`` maps either the exact last user message or a substring of it
    to a reply; a callable receives the whole request. Scripted failures are
    raised, in order, before any reply is produced. The provider records the
    number of calls and the peak number of concurrent calls.
    """

    def __init__(
        self,
        replies: Union[Mapping[str, str], Responder, None] = None,
        *,
        failures: Sequence[BaseException] = (),
        latency: Union[float, Callable[[ChatRequest], float]] = 0.0,
        finish_reason: str = "stop",
    ):
        self.replies = replies
        self._failures = list(failures)
        self.latency = latency
        self.finish_reason = finish_reason
        self.calls = 0
        self.peak_in_flight = 0
        self._in_flight = 0
        self._lock = threading.Lock()

    def _reply(self, request: ChatRequest) -> str:
        if callable(self.replies):
            return self.replies(request)
        if self.replies:
            prompt = request.messages[-1].text
            if prompt in self.replies:
                return self.replies[prompt]
            for key in sorted(self.replies, key=len, reverse=True):
                if key in prompt:
                    return self.replies[key]
        return echo_responder(request)

    def complete(self, request: ChatRequest, images: Mapping[str, bytes]) -> Completion:
        with self._lock:
            self.calls += 1
            self._in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self._in_flight)
            failure = self._failures.pop(0) if self._failures else None
        try:
            delay = self.latency(request) if callable(self.latency) else self.latency
            if delay:
                time.sleep(delay)
            if failure is not None:
                raise failure
            text = self._reply(request)
            return Completion(text, self.finish_reason, _estimate_usage(request, text))
        finally:
            with self._lock:
                self._in_flight -= 1


class OpenAICompatibleProvider:
    """Adapter for servers speaking the OpenAI chat-completions schema.

    Covers hosted APIs and local vLLM servers alike; images are sent inline as
    base64 data URLs.
    """

    def __init__(self, endpoint: str, api_key_env: Optional[str] = None, timeout: float = 600.0):
        self.endpoint = endpoint.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout = timeout

    def _payload(self, request: ChatRequest, images: Mapping[str, bytes]) -> dict:
        messages = []
        for m in request.messages:
            if m.image is None:
                messages.append({"role": m.role, "content": m.text})
                continue
            data = base64.b64encode(images[m.image]).decode("ascii")
            messages.append({"role": m.role, "content": [
                {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{data}"}},
                {"type": "text", "text": m.text},
            ]})
        payload = {
            "model": request.model,
            "messages": messages,
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_output_tokens,
        }
        if request.decoding.seed is not None:
            payload["seed"] = request.decoding.seed
        return payload

    def complete(self, request: ChatRequest, images: Mapping[str, bytes]) -> Completion:
        import httpx

        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if not key:
                raise ProviderRejection(f"environment variable {self.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = httpx.post(
                f"{self.endpoint}/chat/completions",
                json=self._payload(request, images),
                headers=headers,
                timeout=self.timeout,
            )
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code == 429:
            raise RateLimitError(resp.text[:200])
        if resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code >= 400:
            raise ProviderRejection(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            choice = body["choices"][0]
            text = choice["message"]["content"] or ""
            reason = choice.get("finish_reason") or "stop"
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected response body: {exc}") from exc
        if reason not in ("stop", "length"):
            reason = "stop" if reason in ("end_turn", "eos") else "length"
        usage = body.get("usage") or {}
        return Completion(text, reason, {
            "prompt_tokens": int(usage.get("prompt_tokens", 0)),
            "completion_tokens": int(usage.get("completion_tokens", 0)),
        })


# --------------------------------------------------------------------------
# Gateway


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    base_delay: float = 1.0
    factor: float = 2.0
    use_cache: bool = True

    def delay(self, attempt: int) -> float:
        """Backoff before retry number ``attempt`` (1-based)."""
        return self.base_delay * self.factor ** (attempt - 1)


@dataclass(frozen=True)
class ModelSpec:
    provider: str
    model: str
    vision: bool = True

    @property
    def id(self) -> str:
        return f"{self.provider}:{self.model}"

    @classmethod
    def parse(cls, text: str, models: Mapping[str, Mapping] | None = None) -> "ModelSpec":
        provider, sep, model = text.partition(":")
        if not sep or not provider or not model:
            raise ConfigError(f"model must be given as provider:model, got {text!r}")
        info = (models or {}).get(text, {})
        return cls(provider, model, bool(info.get("vision", True)))


class Gateway:
    """Routes requests to providers, consulting the response cache first.

    Shareable between threads; the only mutable state lives in the providers
    and on disk.
    """

    def __init__(
        self,
        providers: Mapping[str, Provider],
        *,
        cache: Optional[ResponseCache] = None,
        store: Optional[ContentStore] = None,
        policy: RetryPolicy = RetryPolicy(),
        sleep: Callable[[float], None] = time.sleep,
        models: Optional[Mapping[str, Mapping]] = None,
        decoding: Decoding = Decoding(),
    ):
        self.providers = dict(providers)
        self.cache = cache
        self.store = store
        self.policy = policy
        self.sleep = sleep
        self.models = dict(models or {})
        self.decoding = decoding
        self.provider_calls = 0
        self._lock = threading.Lock()

    def model(self, text: str) -> ModelSpec:
        return ModelSpec.parse(text, self.models)

    def _images(self, req: ChatRequest) -> dict[str, bytes]:
        if not req.images:
            return {}
        if self.store is None:
            raise ProviderRejection("request carries images but no content store is configured")
        try:
            return {d: self.store.get(d) for d in req.images}
        except KeyError as exc:
            raise ProviderRejection(f"image {exc.args[0]} missing from content store") from None

    def cached(self, req: ChatRequest) -> Optional[ChatResponse]:
        if self.cache is None:
            return None
        try:
            data = self.cache.get(cache_key(req))
        except CacheIOError as exc:
            logger.warning("cache read failed, continuing without cache: %s", exc)
            return None
        if data is None:
            return None
        return ChatResponse.from_payload(data, Provenance(cache_hit=True))

    def complete(self, req: ChatRequest, policy: Optional[RetryPolicy] = None) -> ChatResponse:
        """Return a cached response or call the provider with backoff.

        Raises :class:`TransportError` once retries are exhausted and
        :class:`ProviderRejection` / :class:`MalformedResponse` immediately.
        """
        policy = policy or self.policy
        if policy.use_cache:
            hit = self.cached(req)
            if hit is not None:
                return hit
        try:
            provider = self.providers[req.provider]
        except KeyError:
            raise ConfigError(f"no provider named {req.provider!r}") from None
        images = self._images(req)
        start = time.perf_counter()
        attempt = 0
        while True:
            attempt += 1
            with self._lock:
                self.provider_calls += 1
            try:
                result = provider.complete(req, images)
                break
            except TransportError as exc:
                if attempt >= policy.max_attempts:
                    raise TransportError(f"giving up after {attempt} attempts: {exc}") from exc
                delay = policy.delay(attempt)
                logger.info("transient failure (%s), retry %d in %.1fs", exc, attempt, delay)
                self.sleep(delay)
        if not isinstance(result.text, str):
            raise MalformedResponse("provider returned non-text content")
        response = ChatResponse(
            text=result.text,
            finish_reason=result.finish_reason,
            usage=dict(result.usage),
            provenance=Provenance(
                cache_hit=False,
                attempts=attempt,
                wall_ms=(time.perf_counter() - start) * 1000.0,
            ),
        )
        if policy.use_cache and self.cache is not None:
            try:
                self.cache.put(cache_key(req), response.payload())
            except CacheIOError as exc:
                logger.warning("cache write failed, continuing without cache: %s", exc)
        return response

    def batch_complete(
        self,
        reqs: Sequence[ChatRequest],
        max_in_flight: int = 4,
        policy: Optional[RetryPolicy] = None,
    ) -> list[ChatResponse]:
        """Complete many requests; output ``i`` always answers input ``i``.

        Identical requests are sent once. Failures are embedded per position
        as ``finish_reason == "error"`` responses.
        """
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        keys = [cache_key(r) for r in reqs]
        first: dict[str, int] = {}
        for i, k in enumerate(keys):
            first.setdefault(k, i)

        def run(i: int) -> ChatResponse:
            try:
                return self.complete(reqs[i], policy)
            except GatewayError as exc:
                logger.warning("request %d failed: %s", i, exc)
                attempts = self.policy.max_attempts if isinstance(exc, TransportError) else 1
                return ChatResponse.failure(exc, attempts)

        unique = sorted(first.values())
        results: dict[int, ChatResponse] = {}
        if max_in_flight == 1:
            for i in unique:
                results[i] = run(i)
        else:
            with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
                for i, resp in zip(unique, pool.map(run, unique)):
                    results[i] = resp

        out = []
        for i, k in enumerate(keys):
            leader = first[k]
            if leader == i:
                out.append(results[i])
            else:
                shared = results[leader]
                if shared.ok:
                    shared = replace(shared, provenance=Provenance(cache_hit=True))
                out.append(shared)
        return out


# --------------------------------------------------------------------------
# Configuration


def load_config(path: Union[str, Path, None]) -> dict:
    """Read a JSON config; ``None`` gives the offline default (mock only)."""
    if path is None:
        return {"providers": {"mock": {"kind": "mock"}}, "models": {}, "decoding": {}}
    try:
        config = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    config.setdefault("providers", {"mock": {"kind": "mock"}})
    config.setdefault("models", {})
    config.setdefault("decoding", {})
    return config


def build_provider(name: str, spec: Mapping) -> Provider:
    kind = spec.get("kind", name)
    if kind == "mock":
        replies = spec.get("replies")
        if isinstance(replies, str):
            replies = json.loads(Path(replies).read_text(encoding="utf-8"))
        return MockProvider(replies)
    if kind in ("openai", "openai-compatible", "vllm"):
        if "endpoint" not in spec:
            raise ConfigError(f"provider {name!r} needs an endpoint")
        return OpenAICompatibleProvider(spec["endpoint"], spec.get("api_key_env"), spec.get("timeout", 600.0))
    raise ConfigError(f"provider {name!r} has unknown kind {kind!r}")


def build_gateway(
    config: Mapping,
    cache_dir: Union[str, Path, None] = None,
    store_dir: Union[str, Path, None] = None,
    **kwargs,
) -> Gateway:
    providers = {name: build_provider(name, spec) for name, spec in config.get("providers", {}).items()}
    return Gateway(
        providers,
        cache=ResponseCache(cache_dir) if cache_dir is not None else None,
        store=ContentStore(store_dir) if store_dir is not None else None,
        models=config.get("models", {}),
        decoding=Decoding(**config.get("decoding", {})),
        **kwargs,
    )
