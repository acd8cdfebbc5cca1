"""Contrastive objectives over the three hierarchy levels.

Each level-specific loss follows the same sum-inside-log pattern: two
batch-softmax probabilities for the matched pair are added, then the
negative mean log is taken over the batch,

    loss = -(1/B) * sum_i log(p1(i) + p2(i)).

At clip level the two probabilities come from the two transcript variants
of one narration; at phase and video level they come from the visual and
the aggregated-text query against the same text targets (concepts or
abstracts). The single-space variant pools positive pairs from all levels
into one plain InfoNCE instead.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corpus import ClipBatch, PhaseBatch, VideoBatch
from .encoders import (
    ModelParams,
    Node,
    aggregated_text_rows,
    param_nodes,
    text_embedding_rows,
    visual_embedding_rows,
)
from .errors import ConfigError, EmptyInputError, NumericError
from .numerics import Matrix, Tape


@dataclass(frozen=True)
class LossValue:
    """Scalar loss, per-block gradients, similarity diagnostics."""

    loss: float
    grads: dict[str, Matrix]
    pos_sim: float
    neg_sim: float


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")


def _sim_diagnostics(sims: list[np.ndarray]) -> tuple[float, float]:
    """Mean matched-pair and mean unmatched-pair cosine similarity."""
    pos, neg = [], []
    for s in sims:
        pos.extend(np.diag(s))
        if s.shape[0] > 1:
            off = s[~np.eye(s.shape[0], dtype=bool)]
            neg.extend(off)
    return float(np.mean(pos)), float(np.mean(neg)) if neg else 0.0


def _matched_prob(tape: Tape, queries: Node, targets: Node, tau: float) -> tuple[Node, np.ndarray]:
    """Per-row softmax probability of the matched (diagonal) target."""
    sims = tape.matmul(queries, tape.transpose(targets))
    probs = tape.softmax_rows(sims, tau)
    return tape.gather_diag(probs), sims.value.array


def _finalize(tape: Tape, loss_node: Node, pn: dict[str, Node],
              sims: list[np.ndarray]) -> LossValue:
    loss = float(loss_node.value.array[0, 0])
    if not math.isfinite(loss):
        raise NumericError(f"contrastive loss is not finite: {loss}")
    grads = tape.backward(loss_node)
    pos, neg = _sim_diagnostics(sims)
    return LossValue(
        loss=loss,
        grads={name: grads[node.nid] for name, node in pn.items()},
        pos_sim=pos,
        neg_sim=neg,
    )


def _dual_route_loss(tape: Tape, pn: dict[str, Node],
                     routes: list[tuple[Node, Node]], tau: float) -> LossValue:
    """loss = -(1/B) * sum_i log(p_route1(i) + p_route2(i))."""
    b = routes[0][0].value.rows
    probs, sims = [], []
    for queries, targets in routes:
        p, s = _matched_prob(tape, queries, targets, tau)
        probs.append(p)
        sims.append(s)
    total = tape.log(tape.add(probs[0], probs[1]))
    loss_node = tape.scale(tape.sum_all(total), -1.0 / b)
    return _finalize(tape, loss_node, pn, sims)


def loss_clip(batch: ClipBatch, params: ModelParams, tau: float = 0.07) -> LossValue:
    """Clip narrations from both transcript variants as the two routes."""
    _check_tau(tau)
    tape = Tape()
    pn = param_nodes(tape, params)
    visual = visual_embedding_rows(tape, pn, [e.frames for e in batch.entries])
    text_a = text_embedding_rows(tape, pn, [e.narration_a for e in batch.entries])
    text_b = text_embedding_rows(tape, pn, [e.narration_b for e in batch.entries])
    return _dual_route_loss(tape, pn, [(visual, text_a), (visual, text_b)], tau)


def loss_phase(batch: PhaseBatch, params: ModelParams, tau: float = 0.07) -> LossValue:
    """Visual and aggregated-narration queries against concept targets."""
    _check_tau(tau)
    tape = Tape()
    pn = param_nodes(tape, params)
    visual = visual_embedding_rows(tape, pn, [e.frames for e in batch.entries])
    agg_text = aggregated_text_rows(tape, pn, [e.narrations for e in batch.entries])
    concepts = text_embedding_rows(tape, pn, [e.concept for e in batch.entries])
    return _dual_route_loss(tape, pn, [(visual, concepts), (agg_text, concepts)], tau)


def loss_video(batch: VideoBatch, params: ModelParams, tau: float = 0.07) -> LossValue:
    """Visual and aggregated-narration queries against abstract targets."""
    _check_tau(tau)
    tape = Tape()
    pn = param_nodes(tape, params)
    visual = visual_embedding_rows(tape, pn, [e.frames for e in batch.entries])
    agg_text = aggregated_text_rows(tape, pn, [e.narrations for e in batch.entries])
    abstracts = text_embedding_rows(tape, pn, [e.abstract for e in batch.entries])
    return _dual_route_loss(tape, pn, [(visual, abstracts), (agg_text, abstracts)], tau)


def loss_single(clip: ClipBatch, phase: PhaseBatch, video: VideoBatch,
                params: ModelParams, tau: float = 0.07) -> LossValue:
    """One InfoNCE over the pooled positive pairs of all three levels.

    Every entry contributes one (visual, text) pair: clip frames with the
    first transcript variant, phase frames with the concept, video frames
    with the abstract. The softmax for each visual query runs over the
    whole pooled target set.
    """
    _check_tau(tau)
    tape = Tape()
    pn = param_nodes(tape, params)
    visual_parts = []
    texts = []
    for entries, text_of in ((clip.entries, lambda e: e.narration_a),
                             (phase.entries, lambda e: e.concept),
                             (video.entries, lambda e: e.abstract)):
        if entries:  # a level may sit the pool out entirely
            visual_parts.append(
                visual_embedding_rows(tape, pn, [e.frames for e in entries])
            )
            texts.extend(text_of(e) for e in entries)
    if not visual_parts:
        raise EmptyInputError("pooled batch has no entries at any level")
    queries = visual_parts[0] if len(visual_parts) == 1 else tape.concat_rows(visual_parts)
    targets = text_embedding_rows(tape, pn, texts)
    m = queries.value.rows
    p, sims = _matched_prob(tape, queries, targets, tau)
    loss_node = tape.scale(tape.sum_all(tape.log(p)), -1.0 / m)
    return _finalize(tape, loss_node, pn, [sims])
