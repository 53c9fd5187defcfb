"""Uplink channel, rate, and latency primitives.

Latencies are seconds, model sizes bits, bandwidths Hz. Clients in one tier
share a single frequency band by transmitting one at a time on the full
band, so queueing delay is part of every upload; ``tier_waiting_times``
captures it for a fixed transmission order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

# log-distance path loss: intercept (dB) plus slope (dB per decade of km)
PATH_LOSS_INTERCEPT_DB = 128.1
PATH_LOSS_SLOPE_DB_PER_DECADE = 37.6


class InfeasibleUploadError(ValueError):
    """Raised when a channel's data rate is zero and nothing can be sent."""


@dataclass(frozen=True)
class ChannelParams:
    """One client's uplink while it holds a band of ``bandwidth_hz``."""

    bandwidth_hz: float
    tx_power_w: float
    gain: float
    noise_w: float
    model_size_bits: float

    def __post_init__(self) -> None:
        for name in ("bandwidth_hz", "tx_power_w", "gain", "noise_w", "model_size_bits"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and > 0, got {value!r}")
        if self.gain > 1.0:
            raise ValueError(f"gain is a linear attenuation factor, expected <= 1, got {self.gain!r}")

    @property
    def snr(self) -> float:
        return self.tx_power_w * self.gain / self.noise_w


@dataclass(frozen=True)
class ComputeParams:
    """Local training cost: CPU cycles per sample, CPU speed, sample count."""

    cycles_per_sample: float
    cpu_hz: float
    samples: int = 0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.cycles_per_sample) and self.cycles_per_sample > 0):
            raise ValueError(f"cycles_per_sample must be > 0, got {self.cycles_per_sample!r}")
        if not (math.isfinite(self.cpu_hz) and self.cpu_hz > 0):
            raise ValueError(f"cpu_hz must be > 0, got {self.cpu_hz!r}")
        if self.samples < 0:
            raise ValueError(f"samples must be >= 0, got {self.samples!r}")


def path_loss_db(
    distance_km: float,
    intercept_db: float = PATH_LOSS_INTERCEPT_DB,
    slope_db: float = PATH_LOSS_SLOPE_DB_PER_DECADE,
) -> float:
    """Log-distance path loss in dB for a base-station distance in km."""
    if not (math.isfinite(distance_km) and distance_km > 0):
        raise ValueError(f"distance_km must be finite and > 0, got {distance_km!r}")
    return intercept_db + slope_db * math.log10(distance_km)


def channel_gain(loss_db: float) -> float:
    """Linear power gain corresponding to a path loss in dB."""
    if not math.isfinite(loss_db):
        raise ValueError(f"path loss must be finite, got {loss_db!r}")
    return 10.0 ** (-loss_db / 10.0)


def data_rate_bps(ch: ChannelParams) -> float:
    """Achievable uplink rate: bandwidth times log2(1 + SNR)."""
    return ch.bandwidth_hz * math.log2(1.0 + ch.snr)


def computing_latency_s(cp: ComputeParams) -> float:
    """Seconds to run one local pass over ``samples`` training samples."""
    return cp.cycles_per_sample * cp.samples / cp.cpu_hz


def upload_latency_s(ch: ChannelParams) -> float:
    """Seconds to push one model through the channel once transmission starts."""
    rate = data_rate_bps(ch)
    if rate <= 0.0:
        raise InfeasibleUploadError(
            f"data rate is zero (snr={ch.snr:.3e}); the model can never be uploaded"
        )
    return ch.model_size_bits / rate


def tier_waiting_times(comp_s, upload_s) -> list[float]:
    """Waiting time of each client in a tier's shared-band upload queue.

    Clients transmit in the given fixed order. Client k starts uploading
    once its own computation is done and client k-1 has left the channel:

        wait[0] = 0
        wait[k] = max(0, comp[k-1] + wait[k-1] + upload[k-1] - comp[k])

    Args:
        comp_s: computing latencies, one per client, in upload order.
        upload_s: upload latencies, same length and order.
    """
    if len(comp_s) != len(upload_s):
        raise ValueError(
            f"comp_s and upload_s must have equal length, got {len(comp_s)} and {len(upload_s)}"
        )
    waits: list[float] = []
    for k in range(len(comp_s)):
        if k == 0:
            waits.append(0.0)
        else:
            gap = comp_s[k - 1] + waits[k - 1] + upload_s[k - 1] - comp_s[k]
            waits.append(gap if gap > 0.0 else 0.0)
    return waits


@dataclass(frozen=True)
class TierQueueSchedule:
    """A tier's upload queue in its fixed order, with derived waits."""

    client_ids: tuple
    comp_s: tuple
    upload_s: tuple
    wait_s: tuple = field(init=False)

    def __post_init__(self) -> None:
        if not (len(self.client_ids) == len(self.comp_s) == len(self.upload_s)):
            raise ValueError("client_ids, comp_s and upload_s must have equal length")
        waits = tuple(tier_waiting_times(self.comp_s, self.upload_s))
        object.__setattr__(self, "wait_s", waits)

    def completion_s(self) -> tuple:
        """Per-client completion times comp + wait + upload, in queue order."""
        return tuple(
            c + w + u for c, w, u in zip(self.comp_s, self.wait_s, self.upload_s)
        )

    def makespan_s(self) -> float:
        """Time at which the last client leaves the channel (0 if empty)."""
        completions = self.completion_s()
        return max(completions) if completions else 0.0
