"""Input validation helpers shared by the estimator and the CLI."""

from __future__ import annotations

from typing import Sequence

from .corpus import Conversation


class NotFittedError(RuntimeError):
    """Raised when a fitted attribute is accessed before ``fit``."""


def check_is_fitted(estimator, attributes: Sequence[str]) -> None:
    missing = [a for a in attributes if getattr(estimator, a, None) is None]
    if missing:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first "
            f"(missing {', '.join(missing)})"
        )


def check_conversations(
    items, n_strategies: int | None = None, require_target: bool = False
) -> list[Conversation]:
    """Validate a conversation collection and return it as a list."""
    conversations = list(items)
    if not conversations:
        raise ValueError("expected at least one conversation")
    for conv in conversations:
        if not isinstance(conv, Conversation):
            raise TypeError(f"expected Conversation instances, got {type(conv).__name__}")
        if require_target and not conv.target:
            raise ValueError(f"conversation {conv.id!r} is missing a target response")
        if n_strategies is not None:
            for g in conv.strategies:
                if not 0 <= g < n_strategies:
                    raise ValueError(
                        f"conversation {conv.id!r} has strategy index {g} outside "
                        f"[0, {n_strategies})"
                    )
    return conversations
