"""Seeded synthetic keystroke cohorts with PD-like timing signatures.

Hold times and flight times are log-normal with a target mean and coefficient
of variation. Serial irregularity comes from an AR(1) process on the
log-scale innovations, and a linear fatigue drift slows typing within a
session. None of this is a clinical model; it exists to exercise the pipeline
with a known, tunable class separation.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, replace

import numpy as np

from .ingest import EVENT_HEADER, Cohort, SessionEvents
from .signals import derive_signals


@dataclass(frozen=True)
class PhenotypeProfile:
    ht_mean: float = 0.10
    ht_cv: float = 0.15
    ft_mean: float = 0.20
    ft_cv: float = 0.30
    jitter_rho: float = 0.2
    fatigue_drift: float = 0.0  # seconds added per 100 keystrokes

    def __post_init__(self):
        if not (self.ht_mean > 0 and self.ft_mean > 0):
            raise ValueError("means must be > 0")
        if self.ht_cv < 0 or self.ft_cv < 0:
            raise ValueError("coefficients of variation must be >= 0")
        if not 0 <= self.jitter_rho < 1:
            raise ValueError("jitter_rho must lie in [0, 1)")

    def pd_like(self, slowdown: float = 1.3, cv_factor: float = 2.5, rho: float = 0.5,
                drift: float = 0.005) -> "PhenotypeProfile":
        return PhenotypeProfile(
            self.ht_mean * slowdown, self.ht_cv * cv_factor,
            self.ft_mean * slowdown, self.ft_cv * cv_factor,
            rho, drift,
        )


HC_PROFILE = PhenotypeProfile()
PD_PROFILE = HC_PROFILE.pd_like()


@dataclass(frozen=True)
class SynthConfig:
    n_pd: int = 20
    n_hc: int = 20
    sessions_mean: float = 4.0
    sessions_sd: float = 0.0
    length_mean: float = 200.0  # keystrokes per session
    length_sd: float = 0.0
    pd_profile: PhenotypeProfile = PD_PROFILE
    hc_profile: PhenotypeProfile = HC_PROFILE
    subject_prefix: str = "s"
    session_gap: float = 0.0  # extra idle seconds inserted at random points, 0 = none
    seed: int = 0

    def __post_init__(self):
        if self.n_pd < 1 or self.n_hc < 1:
            raise ValueError("n_pd and n_hc must be >= 1")
        if self.length_mean < 2:
            raise ValueError("sessions need at least 2 keystrokes")
        if self.sessions_mean < 1:
            raise ValueError("sessions_mean must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("pd_profile", "hc_profile"):
            if isinstance(d.get(k), dict):
                d[k] = PhenotypeProfile(**d[k])
        return cls(**d)


def _lognormal_params(mean: float, cv: float) -> tuple[float, float]:
    sigma2 = np.log1p(cv * cv)
    return np.log(mean) - sigma2 / 2.0, np.sqrt(sigma2)


def _ar1(rng, n: int, rho: float) -> np.ndarray:
    """Stationary AR(1) with unit marginal variance."""
    eta = rng.standard_normal(n)
    out = np.empty(n)
    out[0] = eta[0]
    scale = np.sqrt(1.0 - rho * rho)
    for i in range(1, n):
        out[i] = rho * out[i - 1] + scale * eta[i]
    return out


def _intervals(rng, n: int, mean: float, cv: float, rho: float, drift: float) -> np.ndarray:
    mu, sigma = _lognormal_params(mean, cv)
    if sigma == 0:
        base = np.full(n, mean)
    else:
        base = np.exp(mu + sigma * _ar1(rng, n, rho))
    return base + drift * np.arange(n) / 100.0


def generate_session(rng, profile: PhenotypeProfile, n_keys: int, start: float = 0.0):
    """Press and release timestamps for one session of ``n_keys`` keystrokes."""
    ht = _intervals(rng, n_keys, profile.ht_mean, profile.ht_cv, profile.jitter_rho, profile.fatigue_drift)
    ft = _intervals(rng, n_keys, profile.ft_mean, profile.ft_cv, profile.jitter_rho, profile.fatigue_drift)
    press = np.empty(n_keys)
    press[0] = start
    # press_i = release_{i-1} + ft_i
    press[1:] = start + np.cumsum(ht[:-1] + ft[1:])
    return press, press + ht


def _count(rng, mean, sd, lo):
    if sd <= 0:
        return max(lo, int(round(mean)))
    return max(lo, int(round(rng.normal(mean, sd))))


def generate_cohort(cfg: SynthConfig) -> tuple[bytes, bytes]:
    """Return (event CSV bytes, labels CSV bytes).

    Subject k uses a generator seeded by ``(cfg.seed, k)`` so subjects are
    independent of each other and of generation order.
    """
    events = io.StringIO(newline="")
    w = csv.writer(events, lineterminator="\n")
    w.writerow(EVENT_HEADER)
    labels = ["subject_id,label"]
    subjects = [(1, i) for i in range(cfg.n_pd)] + [(0, i) for i in range(cfg.n_hc)]
    for k, (label, i) in enumerate(subjects):
        rng = np.random.default_rng([cfg.seed, k])
        sid = f"{cfg.subject_prefix}{'pd' if label else 'hc'}{i:03d}"
        profile = cfg.pd_profile if label else cfg.hc_profile
        labels.append(f"{sid},{label}")
        for j in range(_count(rng, cfg.sessions_mean, cfg.sessions_sd, 1)):
            n_keys = _count(rng, cfg.length_mean, cfg.length_sd, 2)
            press, release = generate_session(rng, profile, n_keys)
            if cfg.session_gap > 0:
                cut = int(rng.integers(1, n_keys)) if n_keys > 1 else 0
                press[cut:] += cfg.session_gap
                release[cut:] += cfg.session_gap
            for e, (p, r) in enumerate(zip(press, release)):
                w.writerow((sid, f"d{j:02d}", f"k{e % 64}", repr(float(p)), repr(float(r))))
    return events.getvalue().encode(), ("\n".join(labels) + "\n").encode()


def shuffle_labels(cohort: Cohort, seed: int) -> Cohort:
    """Randomly reassign the cohort's labels among its subjects (negative control)."""
    perm = np.random.default_rng(seed).permutation(len(cohort.subjects))
    return permute_labels(cohort, perm)


def permute_labels(cohort: Cohort, perm) -> Cohort:
    labels = [s.label for s in cohort.subjects]
    return Cohort(
        tuple(replace(s, label=labels[int(p)]) for s, p in zip(cohort.subjects, perm)),
        cohort.report,
    )


def per_subject_statistic(cohort: Cohort, channel: str = "ht", stat=np.std) -> dict[str, float]:
    """A model-free feature: ``stat`` over all of a subject's values of ``channel``."""
    out = {}
    for subj in cohort.subjects:
        vals = []
        for sess in subj.sessions:
            seq = derive_signals(sess) if isinstance(sess, SessionEvents) else sess
            vals.append(getattr(seq, channel))
        out[subj.subject_id] = float(stat(np.concatenate(vals)))
    return out
