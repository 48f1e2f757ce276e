"""Bob's passive-basis polarization analyzer, in both propagation directions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .devices import PS_PER_NS, PhotonEvent
from .optics import (BASIS_OF, CHANNEL_ANGLES, CONJUGATE, FilterSpec,
                     JonesVector, PbsSpec, filter_transmission, transmit_probability)

CHANNELS = ("H", "V", "D", "A")
# midpoint of the measured per-channel reverse transmission range
DEFAULT_TB = 0.091


@dataclass(frozen=True)
class ReflectionTap:
    """A point reflector seen by light entering Bob.

    `delay` is the round-trip time from the receiver entrance back to it. A tap
    bound to a channel only reflects photons already routed to that channel.
    """
    name: str
    delay: float
    reflectance: float
    channel: str | None = None

    def __post_init__(self):
        if not 0 <= self.reflectance <= 1:
            raise ValueError(f"reflectance of tap {self.name!r} must lie in [0, 1]")
        if self.delay < 0:
            raise ValueError(f"delay of tap {self.name!r} must be non-negative")
        if self.channel is not None and self.channel not in CHANNELS:
            raise ValueError(f"tap {self.name!r} has unknown channel {self.channel!r}")


def _default_pbs():
    return {"HV": PbsSpec(0.0), "DA": PbsSpec(45.0)}


@dataclass(frozen=True)
class ReceiverModel:
    basis_bs_ratio: float = 0.5
    channel_pbs: dict = field(default_factory=_default_pbs)
    channel_axes: dict = field(default_factory=lambda: dict(CHANNEL_ANGLES))
    forward_transmission: float = 1.0
    reverse_transmission: dict = field(default_factory=lambda: {c: DEFAULT_TB for c in CHANNELS})
    reverse_extinction: dict = field(default_factory=dict)
    entrance_filter: FilterSpec | None = None
    channel_delay: dict = field(default_factory=lambda: {c: 15.0 for c in CHANNELS})
    reflection_taps: tuple = ()

    def __post_init__(self):
        if not 0 <= self.basis_bs_ratio <= 1:
            raise ValueError("basis_bs_ratio must lie in [0, 1]")
        if not 0 <= self.forward_transmission <= 1:
            raise ValueError("forward_transmission must lie in [0, 1]")
        for c in CHANNELS:
            for name in ("channel_axes", "reverse_transmission", "channel_delay"):
                if c not in getattr(self, name):
                    raise ValueError(f"{name} is missing channel {c}")
            if not 0 <= self.reverse_transmission[c] <= 1:
                raise ValueError(f"reverse_transmission[{c}] must lie in [0, 1]")
        ax = self.channel_axes
        for a, b in (("H", "V"), ("D", "A")):
            if abs((ax[b] - ax[a] - 90.0 + 180.0) % 180.0) > 1e-9:
                raise ValueError(f"channel axes inconsistent: {b} must be {a} + 90 deg")
        for basis, ref in (("HV", "H"), ("DA", "D")):
            if basis not in self.channel_pbs:
                raise ValueError(f"channel_pbs is missing basis {basis}")
            if abs((self.channel_pbs[basis].axis_angle - ax[ref] + 90.0) % 180.0 - 90.0) > 1e-9:
                raise ValueError(f"channel_pbs[{basis}] axis must match channel {ref}")
        object.__setattr__(self, "reflection_taps", tuple(self.reflection_taps))

    def basis_ratio(self, channel: str) -> float:
        return self.channel_pbs[BASIS_OF[channel]].extinction_ratio

    def output_ratio(self, channel: str) -> float:
        """Extinction of the polarization a reverse photon leaves the receiver with."""
        return self.reverse_extinction.get(channel, self.basis_ratio(channel))

    def channel_delay_ps(self, channel: str) -> int:
        return int(round(self.channel_delay[channel] * PS_PER_NS))


def _channel_check(channel: str) -> None:
    if channel not in CHANNELS:
        raise ValueError(f"unknown receiver channel {channel!r}")


def port_probability(amp_h, amp_v, channel: str, model: ReceiverModel):
    """Probability a photon with the given state exits (or enters) `channel`'s PBS port."""
    return transmit_probability(amp_h, amp_v, model.channel_axes[channel], model.basis_ratio(channel))


def forward_probabilities(state: JonesVector, model: ReceiverModel, wavelength: float) -> dict:
    t = model.forward_transmission * filter_transmission(wavelength, model.entrance_filter)
    out = {}
    for basis, (c1, c2), share in (("HV", ("H", "V"), model.basis_bs_ratio),
                                   ("DA", ("D", "A"), 1 - model.basis_bs_ratio)):
        p1 = float(port_probability(state.amplitude_h, state.amplitude_v, c1, model))
        out[c1] = t * share * p1
        out[c2] = t * share * (1 - p1)
    out["lost"] = 1 - t
    return out


def route_forward(amp_h, amp_v, wavelength, model: ReceiverModel, rng: np.random.Generator) -> np.ndarray:
    """Channel index (into CHANNELS) per photon, or -1 when lost."""
    n = len(amp_h)
    survive = rng.random(n) < model.forward_transmission * filter_transmission(
        np.asarray(wavelength, dtype=float), model.entrance_filter)
    hv = rng.random(n) < model.basis_bs_ratio
    p_h = port_probability(amp_h, amp_v, "H", model)
    p_d = port_probability(amp_h, amp_v, "D", model)
    first = rng.random(n) < np.where(hv, p_h, p_d)
    idx = np.where(hv, np.where(first, 0, 1), np.where(first, 2, 3))
    return np.where(survive, idx, -1)


def forward_route(photon: PhotonEvent, model: ReceiverModel, rng: np.random.Generator):
    pol = photon.polarization
    idx = route_forward(np.array([pol.amplitude_h]), np.array([pol.amplitude_v]),
                        np.array([photon.wavelength_nm]), model, rng)[0]
    if idx < 0:
        return None
    ch = CHANNELS[idx]
    return ch, photon.time_ps + model.channel_delay_ps(ch)


def reverse_survival(amp_h, amp_v, wavelength, channel: str, model: ReceiverModel):
    """Probability a detector-side photon reaches the receiver entrance.

    Normalized so an optimally aligned photon survives with exactly the
    configured reverse transmission.
    """
    ratio = model.basis_ratio(channel)
    aligned = 1.0 if np.isinf(ratio) else ratio / (ratio + 1)
    p_port = port_probability(amp_h, amp_v, channel, model) / aligned
    return (p_port * model.reverse_transmission[channel]
            * filter_transmission(np.asarray(wavelength, dtype=float), model.entrance_filter))


def route_reverse(amp_h, amp_v, wavelength, channel: str, model: ReceiverModel,
                  rng: np.random.Generator):
    """Vectorized reverse routing.

    Returns (survived mask, output amplitude arrays) where the output state is
    the channel's eigenstate, or its orthogonal partner with the finite
    output-extinction probability.
    """
    _channel_check(channel)
    n = len(amp_h)
    survived = rng.random(n) < reverse_survival(amp_h, amp_v, wavelength, channel, model)
    ratio = model.output_ratio(channel)
    leak = 0.0 if np.isinf(ratio) else 1 / (ratio + 1)
    flipped = rng.random(n) < leak
    ang = np.radians(np.where(flipped, model.channel_axes[CONJUGATE[channel]],
                              model.channel_axes[channel]))
    return survived, np.cos(ang).astype(complex), np.sin(ang).astype(complex)


def reverse_route(photon: PhotonEvent, origin_channel: str, model: ReceiverModel,
                  rng: np.random.Generator) -> PhotonEvent | None:
    _channel_check(origin_channel)
    pol = photon.polarization
    ok, h, v = route_reverse(np.array([pol.amplitude_h]), np.array([pol.amplitude_v]),
                             np.array([photon.wavelength_nm]), origin_channel, model, rng)
    if not ok[0]:
        return None
    return PhotonEvent(photon.time_ps + model.channel_delay_ps(origin_channel), photon.wavelength_nm,
                       JonesVector(complex(h[0]), complex(v[0])), photon.origin, photon.parent_id)


def reverse_transmission_estimate(p_in: float, p_out: float) -> float:
    """Reverse transmission from launched and emerging optical power."""
    if not p_in > 0:
        raise ValueError("p_in must be positive")
    if p_out < 0:
        raise ValueError("p_out must be non-negative")
    if p_out > p_in:
        raise ValueError("p_out exceeds p_in: nonphysical reverse transmission")
    return p_out / p_in


def measured_receiver(**overrides) -> ReceiverModel:
    """Receiver with the measured per-channel reverse extinction ratios."""
    kwargs = dict(
        channel_pbs={"HV": PbsSpec(0.0, 167.0), "DA": PbsSpec(45.0, 10.7)},
        reverse_extinction={"H": 167.0, "V": 660.0, "D": 10.7, "A": 6.4},
    )
    kwargs.update(overrides)
    return ReceiverModel(**kwargs)

