"""Parameters, Adam, cosine lr schedule, finite-difference checks, checkpoints.

Checkpoint format PCK1 (little-endian throughout):

    magic   4 bytes  b"PCK1"
    count   u32      number of parameters
    repeat count times:
        name_len u16, name utf-8 bytes
        rank     u8
        extents  rank * u32
        data     prod(extents) * f32
    optional trailing metadata block:
        magic  4 bytes b"MHD1"
        length u32
        body   length bytes of UTF-8 JSON

Values are stored as float32; training state (Adam moments, step counts) is
deliberately not persisted — a checkpoint is a snapshot of weights plus the
model-shape metadata needed to rebuild the network.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from poco.autodiff import Tensor
from poco.diagnostics import DIAGNOSTICS
from poco.errors import ContractViolation, FormatError

_MAGIC = b"PCK1"
_META_MAGIC = b"MHD1"


class Parameter:
    """Named trainable tensor with per-parameter Adam state."""

    __slots__ = ("name", "value", "adam_m", "adam_v", "step_count")

    def __init__(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        self.name = name
        self.value = Tensor(arr, requires_grad=True)
        self.adam_m = np.zeros_like(arr)
        self.adam_v = np.zeros_like(arr)
        self.step_count = 0

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.data.shape})"


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def adam_step(params: Sequence[Parameter], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update from each parameter's .grad.

    Parameters with a missing or non-finite gradient are skipped untouched
    (moments and step count included) and a diagnostic is recorded.
    """
    for p in params:
        g = p.value.grad
        if g is None:
            DIAGNOSTICS.incr("adam.missing_grad")
            continue
        if not np.all(np.isfinite(g)):
            DIAGNOSTICS.incr("adam.skipped_nonfinite")
            continue
        t = p.step_count + 1
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / (1.0 - beta1 ** t)
        v_hat = p.adam_v / (1.0 - beta2 ** t)
        p.value.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.step_count = t


@dataclass(frozen=True)
class LrSchedule:
    """Cosine annealing from lr_max (step 0) to lr_min (step total_steps)."""

    lr_max: float = 1e-4
    lr_min: float = 1e-7
    total_steps: int = 1

    def __post_init__(self) -> None:
        if not (self.lr_max >= self.lr_min > 0.0):
            raise ContractViolation(
                f"schedule requires lr_max >= lr_min > 0, got {self.lr_max}, {self.lr_min}")
        if self.total_steps < 1:
            raise ContractViolation(f"total_steps must be >= 1, got {self.total_steps}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at an integer step; out-of-range steps clamp with a diagnostic."""
    if step < 0 or step > schedule.total_steps:
        DIAGNOSTICS.incr("schedule.step_clamped")
        step = min(max(step, 0), schedule.total_steps)
    if step == 0:
        return schedule.lr_max
    if step == schedule.total_steps:
        return schedule.lr_min
    span = schedule.lr_max - schedule.lr_min
    return schedule.lr_min + 0.5 * span * (1.0 + math.cos(math.pi * step / schedule.total_steps))


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    worst_index: tuple[int, ...]
    passed: bool
    note: str = ""


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    h: float = 1e-5
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def summary(self) -> str:
        lines = []
        for e in self.entries:
            status = "ok  " if e.passed else "FAIL"
            extra = f" ({e.note})" if e.note else ""
            lines.append(f"{status} {e.name:32s} max_rel_err={e.max_rel_error:.3e}{extra}")
        return "\n".join(lines)


def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter],
               h: float = 1e-5, tol: float = 1e-4,
               max_entries_per_param: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar f() against central differences.

    Relative error uses a floored denominator max(|analytic|, |numeric|, tol)
    so near-zero derivative pairs do not blow up. When
    max_entries_per_param is set, a seeded random subset of coordinates is
    probed per parameter (full sweep otherwise).
    """
    from poco.autodiff import backward  # local import to avoid cycle at module load

    report = GradCheckReport(h=h, tol=tol)

    out = f()
    if out.data.size != 1:
        raise ContractViolation(f"grad_check target must be scalar, got shape {out.data.shape}")
    if not np.isfinite(out.data):
        for p in params:
            report.entries.append(GradCheckEntry(p.name, math.inf, (), False,
                                                 "objective non-finite at base point"))
        return report
    zero_grads(params)
    backward(out)
    analytic = {p.name: (np.zeros_like(p.data) if p.value.grad is None else p.value.grad.copy())
                for p in params}
    zero_grads(params)

    rng = np.random.default_rng(seed)
    for p in params:
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            idxs = np.sort(rng.choice(flat.size, size=max_entries_per_param, replace=False))
        worst = 0.0
        worst_idx: tuple[int, ...] = ()
        note = ""
        ok = True
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f().data)
            flat[i] = orig - h
            f_minus = float(f().data)
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                ok = False
                note = f"non-finite objective while perturbing index {i}"
                worst = math.inf
                break
            numeric = (f_plus - f_minus) / (2.0 * h)
            ana = float(analytic[p.name].reshape(-1)[i])
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), tol)
            if rel > worst:
                worst = rel
                worst_idx = tuple(int(v) for v in np.unravel_index(int(i), p.data.shape))
        if ok:
            ok = worst <= tol
        report.entries.append(GradCheckEntry(p.name, worst, worst_idx, ok, note))
    return report


# ---------------------------------------------------------------------------
# checkpoint I/O


def save_checkpoint(path, params: Sequence[Parameter],
                    metadata: Mapping | None = None) -> None:
    """Write parameters (float32) and optional JSON metadata to a PCK1 file."""
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ContractViolation("duplicate parameter names in checkpoint")
    chunks = [_MAGIC, struct.pack("<I", len(params))]
    for p in params:
        name = p.name.encode("utf-8")
        arr = np.asarray(p.data, dtype="<f4")   # note: ascontiguousarray would promote rank 0 to rank 1
        chunks.append(struct.pack("<H", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.tobytes())
    if metadata is not None:
        body = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
        chunks.append(_META_MAGIC)
        chunks.append(struct.pack("<I", len(body)))
        chunks.append(body)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.off = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise FormatError(f"truncated {self.what}: needed {n} bytes at offset {self.off}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    """Read a PCK1 file -> (ordered name->float64 array mapping, metadata or None)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, "checkpoint")
    if r.take(4) != _MAGIC:
        raise FormatError(f"bad checkpoint magic at offset 0 in {path}")
    count, = r.unpack("<I")
    values: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        rank, = r.unpack("<B")
        extents = r.unpack(f"<{rank}I") if rank else ()
        n_items = int(np.prod(extents, dtype=np.int64)) if rank else 1
        raw = r.take(4 * n_items)
        arr = np.frombuffer(raw, dtype="<f4").reshape(extents).astype(np.float64)
        if name in values:
            raise FormatError(f"duplicate parameter {name!r} in checkpoint")
        values[name] = arr
    metadata = None
    if r.off < len(buf):
        if r.take(4) != _META_MAGIC:
            raise FormatError(f"unexpected trailing bytes at offset {r.off - 4} in {path}")
        meta_len, = r.unpack("<I")
        try:
            metadata = json.loads(r.take(meta_len).decode("utf-8"))
        except ValueError as e:
            raise FormatError(f"bad metadata JSON in {path}: {e}") from e
    if r.off != len(buf):
        raise FormatError(f"{len(buf) - r.off} unread bytes after checkpoint payload in {path}")
    return values, metadata


def restore_parameters(params: Sequence[Parameter], values: Mapping[str, np.ndarray]) -> None:
    """Load checkpoint values into existing parameters (names and shapes must match)."""
    names = {p.name for p in params}
    missing = names - set(values)
    extra = set(values) - names
    if missing or extra:
        raise ContractViolation(
            f"checkpoint/parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
    for p in params:
        v = values[p.name]
        if v.shape != p.data.shape:
            raise ContractViolation(
                f"shape mismatch for {p.name!r}: checkpoint {v.shape} vs model {p.data.shape}")
        p.value.data = v.astype(np.float64)
        p.adam_m = np.zeros_like(p.value.data)
        p.adam_v = np.zeros_like(p.value.data)
        p.step_count = 0
        p.value.grad = None
