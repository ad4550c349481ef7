"""Named random substreams derived from a single root seed.

Every stochastic component asks for its own stream by name, so adding or
reordering draws in one component never perturbs another.  Stream
derivation is stable across processes and platforms (sha256, not
``hash()``).
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, *path: str | int) -> np.random.Generator:
    """Return the generator for the named stream under ``seed``.

    ``path`` segments identify the component, e.g.
    ``substream(7, "tune", "d03", "init")``.  Identical (seed, path)
    always yields an identical generator state.
    """
    label = "/".join(str(p) for p in path)
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    spawn_key = tuple(
        int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)
    )
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key)
    return np.random.default_rng(ss)
