"""Transmission bursts: whole frames to air and back.

A burst is one contiguous stretch of transmission — one or more 46-bit
frames separated by short silent gaps that give the receiver a re-lock
opportunity per frame.  Recovery slides the preamble detector over the
waveform and accepts only frames whose CRC checks out, so corrupted
frames simply go missing (or are reported as corrupt) rather than
producing bogus messages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import framing
from .audio import SampleBuffer
from .modem import ModemConfig, ToneScanner, modulate

FRAME_GAP_SLOTS = 4


def frame_airtime(cfg: ModemConfig) -> float:
    """Seconds of air for one 46-bit frame at cfg's rate."""
    return framing.FRAME_BITS * cfg.samples_per_bit / cfg.sample_rate


def burst_duration(n_frames: int, cfg: ModemConfig, gap_slots: int = FRAME_GAP_SLOTS) -> float:
    """Seconds of air for n frames including inter-frame gaps."""
    if n_frames <= 0:
        return 0.0
    slots = n_frames * framing.FRAME_BITS + (n_frames - 1) * gap_slots
    return slots * cfg.samples_per_bit / cfg.sample_rate


def messages_to_waveform(
    messages: list[framing.ControlMessage],
    cfg: ModemConfig,
    gap_slots: int = FRAME_GAP_SLOTS,
) -> SampleBuffer:
    """Encode and modulate messages into one burst waveform."""
    if not messages:
        return SampleBuffer(np.zeros(0), cfg.sample_rate)
    gap = np.zeros(gap_slots * cfg.samples_per_bit)
    pieces = []
    for i, msg in enumerate(messages):
        if i:
            pieces.append(gap)
        frame_bits = framing.encode_frame(framing.encode_message(msg))
        pieces.append(modulate(frame_bits, cfg).samples)
    return SampleBuffer(np.concatenate(pieces), cfg.sample_rate)


@dataclass(frozen=True)
class RecoveredFrame:
    offset: int                      # sample index of the preamble start
    message: framing.ControlMessage


@dataclass
class BurstScan:
    frames: list[RecoveredFrame]
    corrupt_offsets: list[int]       # preamble locks whose frame failed CRC

    @property
    def messages(self) -> list[framing.ControlMessage]:
        return [f.message for f in self.frames]


def recover_frames(buf: SampleBuffer, cfg: ModemConfig, search_from: int = 0) -> BurstScan:
    """Find and decode every valid frame in a received waveform.

    Each frame is located by its own preamble, so a lost or garbled frame
    does not take the rest of the burst with it.  A preamble lock that
    fails the CRC advances the search by a single slot (the lock may have
    been a false alarm inside payload bits); nearby repeat failures are
    collapsed into one corrupt marker.
    """
    spb = cfg.samples_per_bit
    frame_span = framing.FRAME_BITS * spb
    frames: list[RecoveredFrame] = []
    corrupt: list[int] = []
    if len(buf) < frame_span:
        return BurstScan(frames, corrupt)
    # pad with one silent slot so a lock that lands a few samples late on
    # the final frame still has a full window to decode from
    padded = SampleBuffer(np.concatenate([buf.samples, np.zeros(spb)]), buf.sample_rate)
    scanner = ToneScanner(padded, cfg)
    pos = search_from
    while True:
        hit = scanner.find_preamble(pos)
        if hit is None:
            break
        offset = hit.offset
        if offset + frame_span > len(padded):
            break
        bits, _ = scanner.decode_bits(offset, framing.FRAME_BITS)
        try:
            payload = framing.decode_frame(bits)
            message = framing.decode_message(payload)
        except (framing.FrameError, framing.MessageError):
            if not corrupt or offset - corrupt[-1] > frame_span // 2:
                corrupt.append(offset)
            pos = offset + spb
            continue
        frames.append(RecoveredFrame(offset, message))
        pos = offset + frame_span
    return BurstScan(frames, corrupt)
