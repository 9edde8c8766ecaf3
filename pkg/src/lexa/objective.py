"""Similarity functions and the contrastive training objective.

The loss is an InfoNCE ratio over exponentiated, temperature-scaled
similarities: the positive (optionally joined by one augmented positive view)
against easy negatives, optionally their augmented views, and BM25-mined hard
negatives. With augmentation off it reduces to the plain
positive-vs-negatives form used for encoder fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

from . import autodiff as ad
from . import bm25

AUG_MODES = ("none", "aug_pos", "aug_easy_neg")
SIMILARITIES = ("dot", "cosine")

# float64 exp overflows just above 709
_MAX_EXPONENT = 700.0


class ObjectiveError(ValueError):
    pass


@dataclass
class LossConfig:
    tau: float = 0.1
    similarity: str = "cosine"
    n_easy: int = 1
    n_hard: int = 1
    aug_mode: str = "none"
    use_in_batch_negatives: bool = True

    def validate(self) -> None:
        if self.tau <= 0:
            raise ObjectiveError(f"tau must be positive, got {self.tau}")
        if self.similarity not in SIMILARITIES:
            raise ObjectiveError(f"similarity '{self.similarity}' not in {SIMILARITIES}")
        if self.aug_mode not in AUG_MODES:
            # augmented positives and augmented easy negatives are alternatives,
            # never combined
            raise ObjectiveError(f"aug_mode '{self.aug_mode}' not in {AUG_MODES}")
        if self.n_easy < 0 or self.n_hard < 0:
            raise ObjectiveError("negative sample counts must be >= 0")


def similarity(u: ad.Tensor, v: ad.Tensor, kind: str) -> ad.Tensor:
    """Dot product or cosine similarity as a differentiable scalar."""
    if kind == "dot":
        return ad.dot(u, v)
    if kind == "cosine":
        try:
            return ad.dot(ad.l2_normalize(u), ad.l2_normalize(v))
        except ValueError as err:
            raise ObjectiveError(f"cosine similarity: {err}") from err
    raise ObjectiveError(f"unknown similarity kind '{kind}'")


def _exp_term(h_q, h_other, config: LossConfig) -> ad.Tensor:
    sim = similarity(h_q, h_other, config.similarity)
    scaled = ad.scale(sim, 1.0 / config.tau)
    if abs(scaled.item()) > _MAX_EXPONENT:
        raise ObjectiveError(
            f"similarity/temperature ratio {scaled.item():.3g} overflows exp; "
            "tau may be too small for the similarity scale")
    return ad.exp(scaled)


def gcl_loss(h_q, h_pos, h_aug_pos=None, h_easy=(), h_aug_easy=(), h_hard=(),
             config: LossConfig = None) -> ad.Tensor:
    """Contrastive loss for one query; differentiable in every representation.

    numerator = exp(s(q, pos)/tau) [+ the augmented positive];
    denominator = numerator + sums over easy, augmented-easy, and hard
    negatives. Which augmented terms appear is fixed by ``config.aug_mode``.
    """
    if config is None:
        config = LossConfig()
    config.validate()
    if (h_aug_pos is not None) != (config.aug_mode == "aug_pos"):
        raise ObjectiveError("augmented positive is required iff aug_mode == 'aug_pos'")
    h_aug_easy = list(h_aug_easy)
    if bool(h_aug_easy) != (config.aug_mode == "aug_easy_neg"):
        raise ObjectiveError("augmented easy negatives are required iff aug_mode == 'aug_easy_neg'")

    numerator = _exp_term(h_q, h_pos, config)
    if h_aug_pos is not None:
        numerator = ad.add(numerator, _exp_term(h_q, h_aug_pos, config))
    denominator = numerator
    for h in list(h_easy) + h_aug_easy + list(h_hard):
        denominator = ad.add(denominator, _exp_term(h_q, h, config))
    return ad.add(ad.log(denominator), ad.scale(ad.log(numerator), -1.0))


class MinedNegatives(NamedTuple):
    ids: list[str]
    requested: int
    exhausted: bool  # fewer candidates were available than requested


def mine_hard_negatives(query_id: str, query_text: str, relevant_ids,
                        index: bm25.Bm25Index, count: int) -> MinedNegatives:
    """Top BM25-scoring candidates that are neither relevant nor the query itself.

    Deterministic: ties break by candidate id ascending. Asking for more than
    the pool holds returns everything available, flagged.
    """
    if count < 0:
        raise ObjectiveError(f"negative count must be >= 0, got {count}")
    if count == 0:
        return MinedNegatives([], 0, False)
    exclude = set(relevant_ids) | {query_id}
    ids = bm25.top_k(index, query_text, count, exclude=exclude)
    return MinedNegatives(ids, count, len(ids) < count)
