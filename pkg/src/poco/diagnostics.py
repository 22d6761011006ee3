"""Process-wide diagnostics counters.

Numerical edge cases (zero-norm normalization, clamped schedule steps,
skipped triplets, ...) never fail silently: the code path that handles them
bumps a named counter here. Tests and the CLI can snapshot or reset them.
"""

from __future__ import annotations

import threading


class DiagnosticsCounters:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._counts: dict[str, int] = {}

    def incr(self, key: str, n: int = 1) -> None:
        with self._lock:
            self._counts[key] = self._counts.get(key, 0) + n

    def count(self, key: str) -> int:
        with self._lock:
            return self._counts.get(key, 0)

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def reset(self) -> None:
        with self._lock:
            self._counts.clear()


#: Global counter registry. Keys in use include:
#:   autodiff.l2_normalize_zero   zero-norm vector hit the epsilon floor
#:   adam.skipped_nonfinite       parameter skipped due to non-finite gradient
#:   adam.missing_grad            parameter skipped because no gradient was set
#:   schedule.step_clamped        lr_at called with step outside [0, total_steps]
#:   mining.skipped_no_positive   query dropped: no frame within positive radius
#:   mining.skipped_no_negative   query dropped: no valid negative frame
#:   normals.degenerate           degenerate neighborhood hit the fallback rule
#:   normals.knn_fallback         radius search found <3 neighbors, used 8-NN
#:   voxel.padded                 frame had fewer points than target, padded
#:   query.topk_clamped           top_k exceeded index size
DIAGNOSTICS = DiagnosticsCounters()
