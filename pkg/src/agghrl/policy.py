"""Common interface for aggregation policies and the session driver."""

from __future__ import annotations

import numpy as np

from .sim import Session
from .types import (
    Item,
    Page,
    PageLog,
    SearchRequest,
    SessionLog,
    SlotRecord,
    SourceResults,
    SourceSet,
    UserFeedback,
)


class PagePolicy:
    """Composes one page at a time. Subclasses override :meth:`compose`."""

    name = "policy"

    def reset(self) -> None:
        """Called at the start of every session."""

    def compose(self, request: SearchRequest, results: SourceResults) -> tuple[Page, int | None, list[int] | None]:
        """Return ``(page, option mask or None, per-slot source actions or None)``."""
        raise NotImplementedError

    def play(self, session: Session) -> SessionLog:
        return play_session(self, session)


def page_log(
    request: SearchRequest, results: SourceResults, page: Page, feedback: UserFeedback,
    option: int | None = None, actions: list[int] | None = None,
) -> PageLog:
    slots = [
        SlotRecord(it.item_id, it.source, fb.click, fb.pay, fb.dwell_ms, fb.examined)
        for (_, it), fb in zip(page.slots, feedback.slots)
    ]
    return PageLog(
        request.page_number,
        [float(v) for v in request.user_features],
        [[it.item_id for it in stack] for stack in results.stacks],
        slots,
        option,
        actions,
    )


def play_session(policy: PagePolicy, session: Session) -> SessionLog:
    policy.reset()
    log = SessionLog(session.session_id, session.user.user_id, [float(v) for v in session.query], [], policy.name)
    while True:
        req, res = session.request, session.results
        page, option, actions = policy.compose(req, res)
        feedback = UserFeedback(tuple(session.respond(it, pos) for pos, it in page.slots))
        if page.length:
            log.pages.append(page_log(req, res, page, feedback, option, actions))
        if not session.finish_page(page, feedback):
            return log


def fill_by_actions(results: SourceResults, actions: list[int]) -> Page:
    """Pop stack tops in the given source order."""
    popped = [0] * results.n_sources
    items: list[Item] = []
    for a in actions:
        items.append(results.stacks[a][popped[a]])
        popped[a] += 1
    return Page.from_items(items)


def full_option(results: SourceResults) -> SourceSet:
    """Every nonempty vertical."""
    n_v = results.n_sources - 1
    return SourceSet.from_sources([j for j in range(1, n_v + 1) if results.n(j) > 0], n_v)


def option_legal_mask(
    results: SourceResults, page_number: int = 1, blocked_first_page: tuple[int, ...] = ()
) -> np.ndarray:
    """Options whose verticals all have results; ``blocked_first_page`` lists
    vertical ids that may not appear on page 1."""
    n_v = results.n_sources - 1
    mask = np.ones(1 << n_v, dtype=bool)
    for m in range(1 << n_v):
        for j in range(1, n_v + 1):
            if m >> (j - 1) & 1 and (results.n(j) == 0 or (page_number == 1 and j in blocked_first_page)):
                mask[m] = False
                break
    return mask
