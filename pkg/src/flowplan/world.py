"""Synthetic sound world with exactly decodable ground truth.

Clips are 64x16 non-negative "spectrograms" made of up to four
non-overlapping events.  Each of the 8 event classes is a Gaussian bump
across channels centred at channel 2k, shaped in time by a short attack and
an exponential decay.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

K = 8  # event classes
T = 64  # acoustic frames
C_AC = 16  # acoustic channels
N = 16  # semantic frames
D = 32  # semantic feature dims
POOL = T // N
MAX_TOKENS = 4
COND_DIM = K + MAX_TOKENS * (K + 1)

PROFILE_WIDTH = 1.5
DECODE_THRESHOLD = 0.15
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Grammar:
    min_len: int = 1
    max_len: int = MAX_TOKENS
    min_duration: int = 8
    max_duration: int = 16
    decay_rate: float = 0.3
    noise_std: float = 0.01

    def __post_init__(self):
        if not 1 <= self.min_len <= self.max_len <= MAX_TOKENS:
            raise ValueError(f"token length range must lie in [1, {MAX_TOKENS}]")
        if self.max_len * self.max_duration > T:
            raise ValueError("longest prompt at longest duration does not fit in the clip")


@dataclass(frozen=True)
class Event:
    cls: int
    onset: int
    duration: int


@dataclass(frozen=True)
class EventTimeline:
    events: tuple[Event, ...]

    def __post_init__(self):
        if not 1 <= len(self.events) <= MAX_TOKENS:
            raise ValueError(f"timeline needs 1..{MAX_TOKENS} events, got {len(self.events)}")
        prev_end = 0
        for i, ev in enumerate(self.events):
            if not 0 <= ev.cls < K:
                raise ValueError(f"event class {ev.cls} out of range")
            if ev.duration < 1 or ev.onset + ev.duration > T:
                raise ValueError(f"event {ev} does not fit in {T} frames")
            if i and ev.onset < prev_end:
                raise ValueError("events overlap or are out of order")
            prev_end = ev.onset + ev.duration

    @property
    def classes(self) -> list[int]:
        return [ev.cls for ev in self.events]


@dataclass(frozen=True)
class PromptSpec:
    tokens: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(k) for k in self.tokens))
        if len(self.tokens) > MAX_TOKENS:
            raise ValueError(f"at most {MAX_TOKENS} tokens, got {len(self.tokens)}")
        if any(not 0 <= k < K for k in self.tokens):
            raise ValueError(f"token out of range in {self.tokens}")
        if any(a == b for a, b in zip(self.tokens, self.tokens[1:])):
            raise ValueError(f"immediate repeat in {self.tokens}")


@dataclass(frozen=True)
class PromptCondition:
    c_g: np.ndarray  # [K]
    c_d: np.ndarray  # [MAX_TOKENS, K + 1]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.c_g, self.c_d.ravel()])


@dataclass
class RenderedClip:
    spectrogram: np.ndarray
    timeline: EventTimeline
    seed: int | None = None


# ---------------------------------------------------------------- prompts

def sample_prompt(rng: np.random.Generator, grammar: Grammar = Grammar()) -> PromptSpec:
    n = int(rng.integers(grammar.min_len, grammar.max_len + 1))
    tokens = [int(rng.integers(K))]
    for _ in range(n - 1):
        nxt = int(rng.integers(K - 1))
        tokens.append(nxt + (nxt >= tokens[-1]))
    return PromptSpec(tuple(tokens))


def encode_prompt(prompt: PromptSpec) -> PromptCondition:
    if not prompt.tokens:
        raise ValueError("cannot encode an empty prompt")
    c_g = np.zeros(K)
    for k in set(prompt.tokens):
        c_g[k] = 1.0
    c_g /= c_g.sum()
    c_d = np.zeros((MAX_TOKENS, K + 1))
    for i, k in enumerate(prompt.tokens):
        c_d[i, k] = 1.0
        c_d[i, K] = i / MAX_TOKENS
    return PromptCondition(c_g, c_d)


def null_condition(batch: int | None = None) -> np.ndarray:
    return np.zeros(COND_DIM) if batch is None else np.zeros((batch, COND_DIM))


def encode_prompts(prompts) -> np.ndarray:
    return np.stack([encode_prompt(p).flat() for p in prompts])


# ---------------------------------------------------------------- timelines and rendering

def realize_timeline(prompt: PromptSpec, rng: np.random.Generator, grammar: Grammar = Grammar()) -> EventTimeline:
    """Place the prompt's events in order with random durations and gaps.

    The free frames are split into len+1 gaps by sorted uniform cut points,
    so placement never needs rejection.
    """
    n = len(prompt.tokens)
    if n < 1:
        raise ValueError("prompt has no tokens")
    durations = rng.integers(grammar.min_duration, grammar.max_duration + 1, size=n)
    slack = T - int(durations.sum())
    cuts = np.sort(rng.integers(0, slack + 1, size=n))
    events, cursor, prev_cut = [], 0, 0
    for k, dur, cut in zip(prompt.tokens, durations, cuts):
        cursor += int(cut - prev_cut)
        prev_cut = cut
        events.append(Event(int(k), cursor, int(dur)))
        cursor += int(dur)
    return EventTimeline(tuple(events))


def class_profiles() -> np.ndarray:
    """[K, C_AC] Gaussian channel profiles centred at 2k."""
    c = np.arange(C_AC)[None, :]
    mu = 2.0 * np.arange(K)[:, None]
    return np.exp(-((c - mu) ** 2) / (2 * PROFILE_WIDTH**2))


_PROFILES = class_profiles()
# normalised so a unit-amplitude event of class k scores exactly 1 on filter k
_FILTERS = _PROFILES / np.sum(_PROFILES**2, axis=1, keepdims=True)


def envelope(duration: int, decay_rate: float) -> np.ndarray:
    tau = np.arange(duration, dtype=np.float64)
    env = np.exp(-decay_rate * (tau - 1.0))
    env[0] = 0.5
    if duration > 1:
        env[1] = 1.0
    return env


def render_clean(timeline: EventTimeline, grammar: Grammar = Grammar()) -> np.ndarray:
    spec = np.zeros((T, C_AC))
    for ev in timeline.events:
        env = envelope(ev.duration, grammar.decay_rate)
        spec[ev.onset : ev.onset + ev.duration] += env[:, None] * _PROFILES[ev.cls][None, :]
    return spec


def render_clip(timeline: EventTimeline, rng: np.random.Generator, grammar: Grammar = Grammar(), seed=None) -> RenderedClip:
    spec = render_clean(timeline, grammar) + grammar.noise_std * rng.standard_normal((T, C_AC))
    return RenderedClip(np.maximum(spec, 0.0), timeline, seed)


# ---------------------------------------------------------------- oracles

def _spec_array(x) -> np.ndarray:
    spec = x.spectrogram if isinstance(x, RenderedClip) else np.asarray(x, dtype=np.float64)
    if spec.shape[-2:] != (T, C_AC):
        raise ValueError(f"expected spectrogram [..., {T}, {C_AC}], got {list(spec.shape)}")
    return spec


def window_energies(spectrogram) -> np.ndarray:
    """Matched-filter energies per semantic window: [..., N, K]."""
    spec = _spec_array(spectrogram)
    pooled = spec.reshape(spec.shape[:-2] + (N, POOL, C_AC)).mean(axis=-2)
    return pooled @ _FILTERS.T


def oracle_encode_semantics(clip) -> np.ndarray:
    """Fixed frame-level semantic features [..., N, D]; works on batches too."""
    e = window_energies(clip)
    diff = np.zeros_like(e)
    diff[..., 1:, :] = e[..., 1:, :] - e[..., :-1, :]
    phase = np.pi * np.arange(N) / N
    return np.concatenate(
        [e, diff, e * np.sin(phase)[:, None], e * np.cos(phase)[:, None]], axis=-1
    )


def oracle_decode_events(spectrogram, threshold: float = DECODE_THRESHOLD) -> list[int]:
    """Ordered event classes; per-window argmax (ties to the lower index) above threshold."""
    e = window_energies(spectrogram)
    if e.ndim != 2:
        raise ValueError("decode one spectrogram at a time")
    seq: list[int] = []
    for row in e:
        k = int(np.argmax(row))
        if row[k] > threshold and (not seq or seq[-1] != k):
            seq.append(k)
    return seq


def class_distribution(spectrogram) -> np.ndarray:
    """Softmax over per-class total matched-filter energy; [..., K]."""
    totals = window_energies(spectrogram).sum(axis=-2)
    z = totals - totals.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- datasets

@dataclass
class DatasetShard:
    count: int
    seed: int
    grammar: Grammar
    spectrograms: np.ndarray  # [count, T, C_AC]
    semantics: np.ndarray  # [count, N, D]
    prompts: list[PromptSpec] = field(default_factory=list)

    @property
    def conditions(self) -> np.ndarray:
        return encode_prompts(self.prompts)

    def subset(self, idx) -> DatasetShard:
        idx = list(idx)
        return DatasetShard(
            len(idx), self.seed, self.grammar,
            self.spectrograms[idx], self.semantics[idx], [self.prompts[i] for i in idx],
        )


def clip_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def make_clip(seed: int, index: int, grammar: Grammar = Grammar()) -> tuple[PromptSpec, RenderedClip]:
    rng = clip_rng(seed, index)
    prompt = sample_prompt(rng, grammar)
    timeline = realize_timeline(prompt, rng, grammar)
    return prompt, render_clip(timeline, rng, grammar, seed=index)


def build_dataset(count: int, seed: int, grammar: Grammar = Grammar()) -> DatasetShard:
    if count < 1:
        raise ValueError("count must be >= 1")
    specs = np.empty((count, T, C_AC))
    prompts = []
    for i in range(count):
        prompt, clip = make_clip(seed, i, grammar)
        specs[i] = clip.spectrogram
        prompts.append(prompt)
    # f32 is the storage precision; keep in-memory shards identical to loaded ones
    specs = specs.astype(np.float32).astype(np.float64)
    sem = oracle_encode_semantics(specs).astype(np.float32).astype(np.float64)
    return DatasetShard(count, seed, grammar, specs, sem, prompts)


def save_dataset(shard: DatasetShard, out_dir, force: bool = False) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} exists and is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "count": shard.count,
        "seed": shard.seed,
        "grammar": asdict(shard.grammar),
        "dims": {"K": K, "T": T, "C_ac": C_AC, "N": N, "D": D},
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (out / "clips.f32").write_bytes(shard.spectrograms.astype("<f4").tobytes())
    (out / "semantics.f32").write_bytes(shard.semantics.astype("<f4").tobytes())
    with open(out / "prompts.jsonl", "w") as fh:
        for p in shard.prompts:
            fh.write(json.dumps(list(p.tokens)) + "\n")
    return out


def generate_dataset(count: int, seed: int, grammar: Grammar, out_dir, force: bool = False) -> DatasetShard:
    shard = build_dataset(count, seed, grammar)
    save_dataset(shard, out_dir, force=force)
    return shard


def load_dataset(path) -> DatasetShard:
    src = Path(path)
    meta = json.loads((src / "meta.json").read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"dataset format mismatch in {src}: {meta.get('format_version')}")
    n = meta["count"]
    specs = np.frombuffer((src / "clips.f32").read_bytes(), dtype="<f4").astype(np.float64)
    sem = np.frombuffer((src / "semantics.f32").read_bytes(), dtype="<f4").astype(np.float64)
    prompts = [PromptSpec(tuple(json.loads(line))) for line in (src / "prompts.jsonl").read_text().splitlines()]
    if specs.size != n * T * C_AC or sem.size != n * N * D or len(prompts) != n:
        raise ValueError(f"dataset arrays in {src} disagree with count {n}")
    return DatasetShard(n, meta["seed"], Grammar(**meta["grammar"]), specs.reshape(n, T, C_AC), sem.reshape(n, N, D), prompts)


# ---------------------------------------------------------------- editing benchmark

EDIT_KINDS = ("replace", "swap", "insert", "delete")


def _valid(tokens) -> bool:
    return 1 <= len(tokens) <= MAX_TOKENS and all(a != b for a, b in zip(tokens, tokens[1:]))


def edit_candidates(prompt: PromptSpec) -> dict[str, list[tuple[int, ...]]]:
    """All valid single edits of a prompt, grouped by edit kind."""
    toks = list(prompt.tokens)
    n = len(toks)
    out: dict[str, list[tuple[int, ...]]] = {k: [] for k in EDIT_KINDS}
    for i in range(n):
        for k in range(K):
            if k != toks[i]:
                cand = toks[:i] + [k] + toks[i + 1 :]
                if _valid(cand):
                    out["replace"].append(tuple(cand))
    for i in range(n - 1):
        cand = toks[:i] + [toks[i + 1], toks[i]] + toks[i + 2 :]
        if _valid(cand):
            out["swap"].append(tuple(cand))
    if n < MAX_TOKENS:
        for i in range(n + 1):
            for k in range(K):
                cand = toks[:i] + [k] + toks[i:]
                if _valid(cand):
                    out["insert"].append(tuple(cand))
    if n >= 2:
        for i in range(n):
            cand = toks[:i] + toks[i + 1 :]
            if _valid(cand):
                out["delete"].append(tuple(cand))
    return out


def perturb_prompt(prompt: PromptSpec, rng: np.random.Generator) -> PromptSpec:
    """Apply one edit; the kind is uniform over kinds that have a valid candidate."""
    cands = edit_candidates(prompt)
    kinds = [k for k in EDIT_KINDS if cands[k]]
    kind = kinds[int(rng.integers(len(kinds)))]
    options = cands[kind]
    return PromptSpec(options[int(rng.integers(len(options)))])


def lcs_length(a, b) -> int:
    a, b = list(a), list(b)
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def prompt_similarity(a, b) -> float:
    """0.5 * Jaccard of class sets + 0.5 * LCS / longer length."""
    a = a.tokens if isinstance(a, PromptSpec) else tuple(a)
    b = b.tokens if isinstance(b, PromptSpec) else tuple(b)
    sa, sb = set(a), set(b)
    union = sa | sb
    jac = len(sa & sb) / len(union) if union else 1.0
    longest = max(len(a), len(b))
    order = lcs_length(a, b) / longest if longest else 1.0
    return 0.5 * jac + 0.5 * order


@dataclass(frozen=True)
class EditPair:
    source_index: int
    perturbation_index: int
    source: PromptSpec
    target: PromptSpec
    similarity: float

    def to_json(self) -> dict:
        return {
            "source_index": self.source_index,
            "perturbation_index": self.perturbation_index,
            "source_tokens": list(self.source.tokens),
            "target_tokens": list(self.target.tokens),
            "similarity": self.similarity,
        }

    @classmethod
    def from_json(cls, d: dict) -> EditPair:
        return cls(
            d["source_index"], d["perturbation_index"],
            PromptSpec(tuple(d["source_tokens"])), PromptSpec(tuple(d["target_tokens"])), d["similarity"],
        )


def candidate_pairs(sources, perturbations: int = 10, seed: int = 0) -> list[EditPair]:
    """Each source index gets ``perturbations`` edits from distinct sub-seeds."""
    pairs = []
    for src_idx, prompt in sources:
        for j in range(perturbations):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(src_idx), j]))
            target = perturb_prompt(prompt, rng)
            pairs.append(EditPair(int(src_idx), j, prompt, target, prompt_similarity(prompt, target)))
    return pairs


def select_hard(pairs, keep: int = 100) -> list[EditPair]:
    """Lowest-similarity pairs, ties broken by (source index, perturbation index)."""
    pairs = list(pairs)
    if len(pairs) < keep:
        raise ValueError(f"need at least {keep} candidate pairs, got {len(pairs)}")
    ranked = sorted(pairs, key=lambda p: (p.similarity, p.source_index, p.perturbation_index))
    return ranked[:keep]


def build_hard_benchmark(sources, perturbations: int = 10, keep: int = 100, seed: int = 0) -> list[EditPair]:
    """``sources``: iterable of (clip index, PromptSpec)."""
    return select_hard(candidate_pairs(sources, perturbations, seed), keep)


def save_benchmark(pairs, path) -> None:
    Path(path).write_text(json.dumps([p.to_json() for p in pairs], indent=2) + "\n")


def load_benchmark(path) -> list[EditPair]:
    return [EditPair.from_json(d) for d in json.loads(Path(path).read_text())]
