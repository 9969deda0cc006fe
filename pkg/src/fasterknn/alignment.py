"""Pharaoh-format word alignments (``i-j`` links, space separated)."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import StoreFormatError

Links = list[tuple[int, int]]


def parse_pharaoh(line: str) -> Links:
    links = []
    for item in line.split():
        src, sep, tgt = item.partition("-")
        if not sep:
            raise StoreFormatError(f"malformed alignment link {item!r}")
        try:
            links.append((int(src), int(tgt)))
        except ValueError as exc:
            raise StoreFormatError(f"malformed alignment link {item!r}") from exc
    return sorted(set(links))


def format_pharaoh(links: Iterable[tuple[int, int]]) -> str:
    return " ".join(f"{i}-{j}" for i, j in sorted(set(links)))


def read_alignments(path) -> list[Links]:
    with open(path, encoding="utf-8") as fh:
        return [parse_pharaoh(line) for line in fh.read().splitlines()]


def check_links(links: Links, src_len: int, tgt_len: int) -> None:
    for i, j in links:
        if not (0 <= i < src_len and 0 <= j < tgt_len):
            raise StoreFormatError(
                f"alignment link {i}-{j} out of range for lengths ({src_len}, {tgt_len})"
            )


def source_to_target(
    alignments: Sequence[Links],
    src_offsets: np.ndarray,
    tgt_offsets: np.ndarray,
) -> np.ndarray:
    """Map each global source position to one global target position.

    One-to-many links resolve to the lowest aligned target position.
    Unaligned source positions map to -1.
    """
    mapping = np.full(int(src_offsets[-1]), -1, dtype=np.int64)
    for pair, links in enumerate(alignments):
        s0, t0 = int(src_offsets[pair]), int(tgt_offsets[pair])
        for i, j in sorted(links, reverse=True):
            mapping[s0 + i] = t0 + j
    return mapping


def align_by_dictionary(source, target, dictionary) -> Links:
    """Link each source token to the first unused target token equal to its image."""
    used = set()
    links = []
    for i, s in enumerate(source):
        image = dictionary.get(int(s))
        for j, t in enumerate(target):
            if j not in used and int(t) == image:
                used.add(j)
                links.append((i, j))
                break
    return links
