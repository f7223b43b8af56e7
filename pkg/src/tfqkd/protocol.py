"""Three-bin encoding, sifting against the announced (bin, port), and pi-flip correction."""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .optics import CoherentBin, interfere_at_bs

KEY_BINS = (2, 3)


class Port(str, enum.Enum):
    CONSTRUCTIVE = "C"
    DESTRUCTIVE = "D"

    def inverted(self) -> "Port":
        return Port.DESTRUCTIVE if self is Port.CONSTRUCTIVE else Port.CONSTRUCTIVE


class Role(str, enum.Enum):
    ALICE = "alice"
    BOB = "bob"


# announced (bin, port) -> relation between the two parties' bits in that bin
DECODING_TABLE = {
    (2, Port.CONSTRUCTIVE): "equal",
    (3, Port.CONSTRUCTIVE): "equal",
    (2, Port.DESTRUCTIVE): "xor-one",
    (3, Port.DESTRUCTIVE): "xor-one",
}


@dataclass(frozen=True)
class EncodingBits:
    a1: int
    a2: int

    def __post_init__(self):
        if self.a1 not in (0, 1) or self.a2 not in (0, 1):
            raise ValueError(f"encoding bits must be 0 or 1, got ({self.a1!r}, {self.a2!r})")

    def bit_for_bin(self, bin_label: int) -> int:
        if bin_label == 2:
            return self.a1
        if bin_label == 3:
            return self.a2
        raise ValueError(f"bin {bin_label} carries no key bit")


@dataclass(frozen=True)
class ThreeBinFrame:
    bins: tuple[CoherentBin, CoherentBin, CoherentBin]
    frame_index: int = 0

    def __post_init__(self):
        if len(self.bins) != 3:
            raise ValueError("a frame has exactly three bins")
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")

    @property
    def phases(self) -> tuple[float, float, float]:
        return tuple(b.phase for b in self.bins)


def encode_frame(bits: EncodingBits, mu_per_bin: float, frame_index: int = 0) -> ThreeBinFrame:
    """Bin 1 is the unmodulated reference; bit b in bins 2 and 3 becomes phase b*pi."""
    return ThreeBinFrame(
        (
            CoherentBin(mu_per_bin, 0.0),
            CoherentBin(mu_per_bin, bits.a1 * math.pi),
            CoherentBin(mu_per_bin, bits.a2 * math.pi),
        ),
        frame_index,
    )


@dataclass(frozen=True)
class Announcement:
    frame_index: int
    bin: int
    port: Port

    def __post_init__(self):
        if self.bin not in (1, 2, 3):
            raise ValueError(f"bin must be 1, 2 or 3, got {self.bin!r}")
        object.__setattr__(self, "port", Port(self.port))

    @property
    def relation(self) -> str:
        return DECODING_TABLE[(self.bin, self.port)]


def conclusive_outcome(clicks: Iterable[tuple[int, Port | str]], frame_index: int = 0) -> Announcement | None:
    """Announcement for a frame with exactly one click in the key bins, else None.

    Bin-1 clicks are monitoring data and neither count nor spoil the frame.
    """
    key_clicks = {(b, Port(p)) for b, p in clicks if b in KEY_BINS}
    if len(key_clicks) != 1:
        return None
    (b, p), = key_clicks
    return Announcement(frame_index, b, p)


def derive_key_bit(ann: Announcement, local_bits: EncodingBits, role: Role | str) -> int:
    """Alice keeps her bit; Bob inverts his on destructive announcements."""
    bit = local_bits.bit_for_bin(ann.bin)
    if Role(role) is Role.BOB and ann.port is Port.DESTRUCTIVE:
        return bit ^ 1
    return bit


@dataclass(frozen=True)
class SiftedRecord:
    announcement: Announcement
    alice_bit: int
    bob_bit: int
    corrected: bool = False

    @property
    def concluded_relation(self) -> str:
        return self.announcement.relation

    @property
    def is_error(self) -> bool:
        return self.alice_bit != self.bob_bit


def sift(ann: Announcement, alice: EncodingBits, bob: EncodingBits) -> SiftedRecord:
    return SiftedRecord(ann, derive_key_bit(ann, alice, Role.ALICE), derive_key_bit(ann, bob, Role.BOB))


def reference_visibility(c1_constructive: int, c1_destructive: int) -> float | None:
    """(C1 - D1) / (C1 + D1) for the reference bin; None when the window is empty."""
    total = c1_constructive + c1_destructive
    if total <= 0:
        return None
    return (c1_constructive - c1_destructive) / total


def window_flip_decisions(c1, d1, threshold: float = 0.0, mode: str = "visibility"):
    """Per-window flip decisions from reference-bin counts.

    mode "visibility" flips when (C1 - D1)/(C1 + D1) < threshold; mode "counts"
    flips when the raw C1 count is below threshold. Windows without any bin-1
    data inherit the previous decision (no flip before the first data) and are
    flagged. Returns (flip, flagged) boolean arrays.
    """
    c1 = np.asarray(c1, dtype=np.int64)
    d1 = np.asarray(d1, dtype=np.int64)
    total = c1 + d1
    flagged = total == 0
    if mode == "visibility":
        if not -1.0 < threshold < 1.0:
            raise ValueError("visibility threshold must lie in (-1, 1)")
        with np.errstate(invalid="ignore", divide="ignore"):
            vis = (c1 - d1) / total
        raw = vis < threshold
    elif mode == "counts":
        raw = c1 < threshold
    else:
        raise ValueError(f"unknown flip-correction mode {mode!r}")
    # carry the last decision forward across empty windows
    have = np.where(~flagged, np.arange(total.size), -1)
    last = np.maximum.accumulate(have) if have.size else have
    flip = np.where(last >= 0, raw[np.maximum(last, 0)], False)
    return flip.astype(bool), flagged


@dataclass
class FlipCorrection:
    records: list[SiftedRecord]
    reference: list[tuple[int, int, int]]
    flipped_windows: np.ndarray
    flagged_windows: np.ndarray


def flip_correction(
    records: Sequence[SiftedRecord],
    reference: Iterable[tuple[int, int, int]],
    window_frames: int,
    threshold: float = 0.0,
    mode: str = "visibility",
    n_frames: int | None = None,
) -> FlipCorrection:
    """Invert the port interpretation of every record in windows whose reference bin drops.

    ``reference`` holds (frame_index, c1, d1) entries; frames not listed had no
    bin-1 clicks. The corrected reference counts are returned as well, with C1
    and D1 swapped in flipped windows, so a second pass leaves the stream alone.
    """
    if window_frames < 1:
        raise ValueError("window_frames must be >= 1")
    reference = list(reference)
    last_frame = max(
        [r.announcement.frame_index for r in records] + [f for f, _, _ in reference] + [-1]
    )
    if n_frames is None:
        n_frames = last_frame + 1
    n_windows = max(-(-n_frames // window_frames), 1)
    c1 = np.zeros(n_windows, dtype=np.int64)
    d1 = np.zeros(n_windows, dtype=np.int64)
    for f, c, d in reference:
        c1[f // window_frames] += c
        d1[f // window_frames] += d
    flip, flagged = window_flip_decisions(c1, d1, threshold, mode)

    out = []
    for r in records:
        if flip[r.announcement.frame_index // window_frames]:
            ann = replace(r.announcement, port=r.announcement.port.inverted())
            out.append(SiftedRecord(ann, r.alice_bit, r.bob_bit ^ 1, corrected=True))
        else:
            out.append(r)
    ref_out = [(f, d, c) if flip[f // window_frames] else (f, c, d) for f, c, d in reference]
    return FlipCorrection(out, ref_out, flip, flagged)


def sifting_table_check(mu: float = 0.1) -> list[dict]:
    """Brute-force all 16 (a1, a2, b1, b2) under ideal optics against the decoding table.

    Every key-bin port that receives light must be a decoding-table outcome whose
    relation holds for the actual bits, and the two derived key bits must agree.
    Returns one row per (bits, bin, port) outcome with a ``pass`` field.
    """
    rows = []
    for a1 in (0, 1):
        for a2 in (0, 1):
            for b1 in (0, 1):
                for b2 in (0, 1):
                    alice, bob = EncodingBits(a1, a2), EncodingBits(b1, b2)
                    fa, fb = encode_frame(alice, mu), encode_frame(bob, mu)
                    ports = [interfere_at_bs(x, y) for x, y in zip(fa.bins, fb.bins)]
                    ref_ok = ports[0].destructive <= 1e-15 and ports[0].constructive > 0
                    lit = []
                    for b in KEY_BINS:
                        pi = ports[b - 1]
                        for port, val in ((Port.CONSTRUCTIVE, pi.constructive), (Port.DESTRUCTIVE, pi.destructive)):
                            if val > 1e-15:
                                lit.append((b, port))
                    for b, port in lit:
                        ann = conclusive_outcome({(b, port)})
                        rec = sift(ann, alice, bob)
                        x, y = alice.bit_for_bin(b), bob.bit_for_bin(b)
                        holds = (x == y) if ann.relation == "equal" else ((x ^ y) == 1)
                        rows.append({
                            "a1": a1, "a2": a2, "b1": b1, "b2": b2,
                            "bin": b, "port": port.value, "relation": ann.relation,
                            "alice_bit": rec.alice_bit, "bob_bit": rec.bob_bit,
                            "pass": bool(holds and not rec.is_error and ref_ok and len(lit) == 2),
                        })
    return rows


RECORD_COLUMNS = ("frame_index", "bin", "port", "alice_bit", "bob_bit", "corrected_flag")


def write_records(records: Iterable[SiftedRecord], fh: io.TextIOBase) -> int:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    n = 0
    for r in records:
        a = r.announcement
        w.writerow((a.frame_index, a.bin, a.port.value, r.alice_bit, r.bob_bit, int(r.corrected)))
        n += 1
    return n


def read_records(fh: io.TextIOBase) -> list[SiftedRecord]:
    reader = csv.reader(fh)
    header = next(reader)
    if tuple(header) != RECORD_COLUMNS:
        raise ValueError(f"unexpected record header {header!r}")
    out = []
    for row in reader:
        f, b, p, ab, bb, cf = row
        out.append(SiftedRecord(Announcement(int(f), int(b), Port(p)), int(ab), int(bb), bool(int(cf))))
    return out
