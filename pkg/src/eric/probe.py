"""Entity-coherence perturbation probe and codebook diagnostics."""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import stats

from .inference import (_frozen, gold_states, predict_slot_states, predicted_states, random_states,
                        score_sequence)
from .model import EricModel
from .rng import make_rng
from .text import AnonymizedExample

STATE_MODES = ("gold", "predicted", "random")


@dataclass
class PerturbationRecord:
    example_index: int
    sentence_index: int
    original: int        # placeholder token id
    replacement: int
    logp_original: float
    logp_perturbed: float

    @property
    def correct(self) -> bool:
        return self.logp_original > self.logp_perturbed


def perturb_example(ex: AnonymizedExample, n: int, replacement: int, is_placeholder) -> AnonymizedExample:
    """Copy of ``ex`` with the first placeholder of sentence ``n`` swapped for ``replacement``."""
    s, e = ex.sentence_spans[n]
    out = list(ex.output_ids)
    pos = next(i for i in range(s, e) if is_placeholder(out[i]))
    original = out[pos]
    out[pos] = replacement
    ents = list(ex.mentioned_entity)
    if ents[n] == original:
        ents[n] = replacement
    return replace(ex, output_ids=out, mentioned_entity=ents, gold_states=None)


def perturbation_candidates(ex: AnonymizedExample, is_placeholder, rng: np.random.Generator,
                            ) -> list[tuple[int, int, int]]:
    """(sentence, original, replacement) for every eligible sentence.

    A sentence is eligible when it has a placeholder and at least two distinct
    entities were mentioned before it, so a different earlier entity exists.
    """
    out = []
    seen: list[int] = []
    for n, (s, e) in enumerate(ex.sentence_spans):
        sent = ex.output_ids[s:e]
        first = next((t for t in sent if is_placeholder(t)), None)
        if first is not None and len(seen) >= 2:
            pool = [p for p in seen if p != first]
            if pool:
                out.append((n, first, int(pool[int(rng.integers(len(pool)))])))
        for t in sent:
            if is_placeholder(t) and t not in seen:
                seen.append(t)
    return out


def _states_for(model: EricModel, batch, mode: str, rng: np.random.Generator) -> np.ndarray | None:
    if not model.config.stateful or not model.config.state_injection:
        return np.zeros(batch.sent_start.shape + (model.config.D,)) if model.config.stateful else None
    if mode == "gold":
        return gold_states(model, batch)[0]
    if mode == "random":
        return random_states(model, batch, rng)[0]
    return predicted_states(model, batch)[0]


def perturb_and_score(model: EricModel, examples: Sequence[AnonymizedExample], vocab, mode: str = "predicted",
                      seed: int = 0, batch_size: int = 16) -> list[PerturbationRecord]:
    """Score each original sentence against its one-entity perturbation.

    Prefixes are never modified. With ``predicted`` states the perturbed
    sentence's ŝ_n is recomputed for the replacement entity from the shared
    prefix; ``gold`` uses quantized event vectors of whichever sentence is
    scored; ``random`` draws codebook rows with the run's seed.
    """
    from .training import collate

    if mode not in STATE_MODES:
        raise ValueError(f"unknown state mode {mode!r}")
    m = _frozen(model)
    cfg = m.config
    cand_rng = make_rng(seed, "perturb")
    state_rng = make_rng(seed, "random_states")
    jobs = []
    for i, ex in enumerate(examples):
        for n, orig, rep in perturbation_candidates(ex, vocab.is_placeholder, cand_rng):
            jobs.append((i, n, orig, rep))
    records: list[PerturbationRecord] = []
    for j in range(0, len(jobs), batch_size):
        chunk = jobs[j: j + batch_size]
        originals = [examples[i] for i, *_ in chunk]
        perturbed = [perturb_example(examples[i], n, rep, vocab.is_placeholder) for i, n, _, rep in chunk]
        b_orig = collate(originals, cfg)
        b_pert = collate(perturbed, cfg)
        rows = np.arange(len(chunk))
        slot = np.array([n for _, n, _, _ in chunk])
        if mode == "predicted" and cfg.stateful and cfg.state_injection:
            # prefix states are shared; only slot n differs between the pair
            s_orig = _prefix_predicted(m, b_orig, slot)
            s_pert = s_orig.copy()
            vec, _ = predict_slot_states(m, b_pert, s_pert, slot)
            has = b_pert.ent_tok[rows, slot] != cfg.none_id
            s_pert[rows, slot] = np.where(has[:, None], vec, 0.0)
        else:
            s_orig = _states_for(m, b_orig, mode, state_rng)
            if mode == "random" and s_orig is not None:
                # one random draw shared by the pair
                s_pert = s_orig.copy()
            else:
                s_pert = _states_for(m, b_pert, mode, state_rng)
        lp_o = score_sequence(m, b_orig, s_orig)[rows, slot]
        lp_p = score_sequence(m, b_pert, s_pert)[rows, slot]
        for (i, n, orig, rep), a, b in zip(chunk, lp_o, lp_p):
            records.append(PerturbationRecord(i, n, orig, rep, float(a), float(b)))
    return records


def _prefix_predicted(m: EricModel, batch, slot: np.ndarray) -> np.ndarray:
    """Predicted states for every slot up to and including ``slot`` per example."""
    cfg = m.config
    B, N = batch.sent_start.shape
    states = np.zeros((B, N, cfg.D))
    for n in range(int(slot.max()) + 1):
        vec, _ = predict_slot_states(m, batch, states, n)
        real = batch.sent_mask[:, n] & (batch.ent_tok[:, n] != cfg.none_id) & (n <= slot)
        states[real, n] = vec[real]
    return states


def accuracy_by_position(records: Sequence[PerturbationRecord]) -> list[tuple[int, float, int]]:
    by: dict[int, list[bool]] = {}
    for r in records:
        by.setdefault(r.sentence_index, []).append(r.correct)
    return [(n, float(np.mean(v)), len(v)) for n, v in sorted(by.items())]


def mean_accuracy(records: Sequence[PerturbationRecord]) -> float:
    """Accuracy averaged over sentence positions (each position weighted equally)."""
    rows = accuracy_by_position(records)
    return float(np.mean([a for _, a, _ in rows])) if rows else float("nan")


def accuracy_csv(records: Sequence[PerturbationRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["position", "accuracy", "count"])
    for n, acc, cnt in accuracy_by_position(records):
        w.writerow([n, f"{acc:.6f}", cnt])
    return buf.getvalue()


def paired_sign_test(a: Sequence[PerturbationRecord], b: Sequence[PerturbationRecord]) -> dict:
    """One-sided sign test that system ``a`` is right more often than ``b`` on the same items.

    Items are matched by (example, sentence, replacement); ties are dropped.
    """
    key = lambda r: (r.example_index, r.sentence_index, r.replacement)  # noqa: E731
    bmap = {key(r): r for r in b}
    wins = losses = 0
    for r in a:
        other = bmap.get(key(r))
        if other is None:
            continue
        if r.correct and not other.correct:
            wins += 1
        elif other.correct and not r.correct:
            losses += 1
    n = wins + losses
    p = stats.binomtest(wins, n, 0.5, alternative="greater").pvalue if n else 1.0
    return {"wins": wins, "losses": losses, "p_value": float(p)}


# ---------------------------------------------------------------------------
# codebook diagnostics


@dataclass
class StateDiagnostics:
    utilization: int
    K: int
    n_assignments: int
    top_states: list[tuple[int, int]]
    purity: float | None
    chance_purity: float | None
    n_latent_states: int | None

    def to_dict(self) -> dict:
        return {
            "utilization": self.utilization, "K": self.K, "n_assignments": self.n_assignments,
            "utilization_fraction": self.utilization / self.K,
            "top_states": [list(t) for t in self.top_states],
            "purity": self.purity, "chance_purity": self.chance_purity,
            "n_latent_states": self.n_latent_states,
        }


def cluster_purity(assign: Sequence[int], gold: Sequence[int]) -> float:
    """Frequency-weighted share of each cluster's majority gold label."""
    if len(assign) != len(gold) or len(assign) == 0:
        raise ValueError("need equal-length non-empty assignments")
    joint = Counter(zip(assign, gold))
    best: dict[int, int] = {}
    for (k, _), c in joint.items():
        best[k] = max(best.get(k, 0), c)
    return sum(best.values()) / len(assign)


def chance_purity(gold: Sequence[int], n_latent_states: int) -> float:
    """Purity a state-blind assignment reaches: the larger of 1/#states and the majority share."""
    majority = Counter(gold).most_common(1)[0][1] / len(gold)
    return max(1.0 / n_latent_states, majority)


def state_assignments(model: EricModel, examples: Sequence[AnonymizedExample], batch_size: int = 32,
                      ) -> tuple[list[int], list[int | None]]:
    """Codebook index of every entity sentence's event vector and its gold state."""
    from .training import collate

    m = _frozen(model)
    cfg = m.config
    ks: list[int] = []
    golds: list[int | None] = []
    for j in range(0, len(examples), batch_size):
        chunk = list(examples[j: j + batch_size])
        batch = collate(chunk, cfg)
        _, idx = gold_states(m, batch)
        for b, ex in enumerate(chunk):
            for n, p in enumerate(batch.ent_tok[b]):
                if batch.sent_mask[b, n] and p != cfg.none_id:
                    ks.append(int(idx[b, n]))
                    g = None if ex.gold_states is None or n >= len(ex.gold_states) else ex.gold_states[n]
                    golds.append(g)
    return ks, golds


def state_diagnostics(model: EricModel, examples: Sequence[AnonymizedExample],
                      n_latent_states: int | None = None) -> StateDiagnostics:
    ks, golds = state_assignments(model, examples)
    counts = Counter(ks)
    top = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:10]
    pairs = [(k, g) for k, g in zip(ks, golds) if g is not None]
    purity = chance = None
    if pairs:
        a, g = zip(*pairs)
        if n_latent_states is None:
            n_latent_states = len(set(g))
        purity = cluster_purity(a, g)
        chance = chance_purity(g, n_latent_states)
    return StateDiagnostics(len(counts), model.config.K, len(ks), top, purity, chance, n_latent_states)


def mention_control(outputs, vocab) -> dict:
    """Share of generated sentences that mention exactly their predicted entity.

    A sentence with p̂_n = <none> counts as correct when it has no placeholder;
    otherwise it must contain the predicted placeholder.
    """
    ok = total = 0
    for ids, predicted in outputs:
        starts = [i for i, t in enumerate(ids) if t == vocab.sent_id] + [len(ids)]
        for n, p in enumerate(predicted):
            sent = ids[starts[n] + 1: starts[n + 1]]
            phs = {t for t in sent if vocab.is_placeholder(t)}
            if p is None:
                ok += not phs
            else:
                ok += vocab.placeholder_id(p) in phs
            total += 1
    return {"correct": ok, "total": total, "accuracy": ok / total if total else float("nan")}
