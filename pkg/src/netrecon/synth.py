"""Synthetic cohorts with known cross-network coupling.

Recordings follow a block-coupled vector-autoregressive process

    x_t = A x_{t-lag} + eps_t,   eps ~ N(0, noise_sd^2 I)

where block (target j, source i) of A is a random sparse mixing matrix
scaled by the coupling strength G[i][j]. The coupling matrix is the
ground truth that downstream predictability and attention-contribution
analyses are scored against. Class-conditioned cohorts override G per
label while reusing the same mixing draws, so classes differ only where
their couplings differ.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ParcelTimeSeries, write_atlas, write_recording, NetworkAtlas
from .seeding import rng_for


@dataclass
class CouplingSpec:
    parcels_per_network: list[int] = field(
        default_factory=lambda: [16, 32, 48, 16, 32, 16, 32])
    coupling: np.ndarray | None = None        # (N, N), source -> target, in [0, 1]
    noise_sd: float = 1.0
    lag: int = 1
    class_profiles: dict[str, np.ndarray] | None = None
    spectral_cap: float = 0.9
    mix_density: float = 0.5
    burn_in: int = 200

    def __post_init__(self):
        n = len(self.parcels_per_network)
        if n < 1 or min(self.parcels_per_network) < 1:
            raise ValueError("parcels_per_network must be positive")
        if self.coupling is None:
            self.coupling = 0.3 * np.eye(n)
        self.coupling = np.asarray(self.coupling, dtype=np.float64)
        if self.coupling.shape != (n, n):
            raise ValueError(f"coupling must be {n}x{n}")
        if self.coupling.min() < 0 or self.coupling.max() > 1:
            raise ValueError("coupling entries must lie in [0, 1]")
        if not 0 < self.spectral_cap < 1:
            raise ValueError("spectral_cap must be in (0, 1)")
        if self.lag < 1:
            raise ValueError("lag must be >= 1")
        if self.class_profiles:
            self.class_profiles = {
                k: np.asarray(v, dtype=np.float64) for k, v in self.class_profiles.items()}
            for k, g in self.class_profiles.items():
                if g.shape != (n, n):
                    raise ValueError(f"class profile {k!r} must be {n}x{n}")

    @property
    def n_networks(self) -> int:
        return len(self.parcels_per_network)

    @property
    def parcel_count(self) -> int:
        return int(sum(self.parcels_per_network))

    def coupling_for(self, label: str) -> np.ndarray:
        if self.class_profiles and label in self.class_profiles:
            return self.class_profiles[label]
        return self.coupling

    def membership(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_networks),
                         np.asarray(self.parcels_per_network))


@dataclass
class SyntheticCohort:
    recordings: list[ParcelTimeSeries]
    ground_truth: CouplingSpec
    seed: int
    manifest: Path | None = None
    atlas_path: Path | None = None


def build_transition(spec: CouplingSpec, rng: np.random.Generator,
                     coupling: np.ndarray | None = None) -> np.ndarray:
    """Assemble the C x C transition matrix and cap its spectral radius.

    The mixing draw sequence is independent of the coupling values, so
    two calls with identically seeded generators but different coupling
    matrices differ only in block scales.
    """
    g = spec.coupling if coupling is None else np.asarray(coupling, dtype=np.float64)
    sizes = np.asarray(spec.parcels_per_network)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    c = spec.parcel_count
    a = np.zeros((c, c))
    for j in range(spec.n_networks):          # target block row
        for i in range(spec.n_networks):      # source block column
            mix = rng.normal(0.0, 1.0, (sizes[j], sizes[i]))
            keep = rng.random((sizes[j], sizes[i])) < spec.mix_density
            mix = mix * keep / np.sqrt(spec.mix_density * sizes[i])
            a[offsets[j]:offsets[j + 1], offsets[i]:offsets[i + 1]] = g[i, j] * mix
    radius = float(np.max(np.abs(np.linalg.eigvals(a))))
    if radius > spec.spectral_cap:
        a *= spec.spectral_cap / radius
    return a


def generate_recording(a: np.ndarray, spec: CouplingSpec, subject_id: str,
                       session: int, label: str, t_total: int,
                       rng: np.random.Generator,
                       age: float | None = None) -> ParcelTimeSeries:
    """Simulate one recording; burn-in steps are discarded."""
    c = a.shape[0]
    steps = spec.burn_in + t_total
    x = np.zeros((spec.lag + steps, c))
    for t in range(spec.lag, spec.lag + steps):
        x[t] = a @ x[t - spec.lag]
        if spec.noise_sd > 0:
            x[t] += spec.noise_sd * rng.standard_normal(c)
    values = x[spec.lag + spec.burn_in:]
    if not np.isfinite(values).all():
        raise ArithmeticError(f"non-finite sample in simulated recording "
                              f"{subject_id}/{session}")
    return ParcelTimeSeries(subject_id, session, label, age, values)


_AGE_BASE = {"CN": 68.0, "MCI": 72.0, "AD": 76.0, "UNLABELED": 70.0}


def gen_cohort(spec: CouplingSpec, subjects_per_class: dict[str, int],
               sessions: int, t_total: int, seed: int,
               outdir: str | Path | None = None) -> SyntheticCohort:
    """Generate per-subject, per-session recordings with class-specific
    coupling; optionally write them in the pipeline's file formats.

    Labels without a class profile fall back to the base coupling.
    """
    transitions = {
        label: build_transition(spec, rng_for(seed, "mixing"),
                                coupling=spec.coupling_for(label))
        for label in subjects_per_class
    }
    recordings: list[ParcelTimeSeries] = []
    for label in sorted(subjects_per_class):
        for k in range(subjects_per_class[label]):
            subject = f"{label.lower()}{k:03d}"
            age_rng = rng_for(seed, "age", subject)
            age = round(_AGE_BASE[label] + age_rng.uniform(-8.0, 8.0), 1)
            for sess in range(sessions):
                rec_rng = rng_for(seed, "recording", subject, sess)
                recordings.append(generate_recording(
                    transitions[label], spec, subject, sess, label, t_total,
                    rec_rng, age=age + 0.5 * sess))
    cohort = SyntheticCohort(recordings, spec, seed)
    if outdir is not None:
        cohort.manifest, cohort.atlas_path = write_cohort(cohort, outdir)
    return cohort


def write_cohort(cohort: SyntheticCohort, outdir: str | Path) -> tuple[Path, Path]:
    """Emit recordings, atlas, manifest, and the ground-truth couplings."""
    outdir = Path(outdir)
    rec_dir = outdir / "recordings"
    rec_dir.mkdir(parents=True, exist_ok=True)
    spec = cohort.ground_truth
    atlas = NetworkAtlas(spec.membership())
    atlas_path = outdir / "atlas.tsv"
    write_atlas(atlas_path, atlas)
    lines = []
    for rec in cohort.recordings:
        name = f"{rec.subject_id}_s{rec.session_index}.csv"
        write_recording(rec_dir / name, rec)
        lines.append(f"recordings/{name}")
    manifest = outdir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    labels = sorted({r.label for r in cohort.recordings})
    with (outdir / "ground_truth.txt").open("w", encoding="utf-8") as fh:
        fh.write(f"networks = {spec.n_networks}\n")
        fh.write("parcels_per_network = "
                 + ",".join(str(p) for p in spec.parcels_per_network) + "\n")
        fh.write(f"lag = {spec.lag}\n")
        for label in labels:
            g = spec.coupling_for(label)
            for i in range(spec.n_networks):
                for j in range(spec.n_networks):
                    fh.write(f"g.{label}.{i}.{j} = {float(g[i, j])!r}\n")
    return manifest, atlas_path


def read_ground_truth(path) -> dict[str, np.ndarray]:
    """Parse the couplings back out of ground_truth.txt, keyed by label."""
    entries: dict[str, list[tuple[int, int, float]]] = {}
    n = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key == "networks":
            n = int(val)
        elif key.startswith("g."):
            _, label, i, j = key.split(".")
            entries.setdefault(label, []).append((int(i), int(j), float(val)))
    if n is None:
        raise ValueError(f"{path}: missing 'networks' entry")
    out = {}
    for label, triples in entries.items():
        g = np.zeros((n, n))
        for i, j, v in triples:
            g[i, j] = v
        out[label] = g
    return out
