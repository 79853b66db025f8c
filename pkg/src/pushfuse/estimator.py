"""Online physical-parameter estimation and fusion with a visual prior.

An ensemble of Gaussian-output regressors maps a short history of observations
and actions to the hidden parameter. The ensemble mean is the point estimate;
member disagreement gives the epistemic variance, the mean predicted variance
the aleatoric one, and their sum the total. A prior distilled from scored
visual queries is fused with the online estimate by inverse-variance weighting
at every control step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    DataError,
    EmptyPrior,
    EnsembleTooSmall,
    InvalidVariance,
    ShapeError,
)
from .nets import Adam, GaussianHead

HISTORY_STEPS = 20
STEP_FEATURES = 8  # 6 state channels + 2 previous-action channels


@dataclass(frozen=True)
class ParamEstimate:
    """Scalar estimate with strictly positive variance (m, m^2)."""

    value: float
    variance: float
    source: str = ""

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))
        object.__setattr__(self, "variance", float(self.variance))
        if not np.isfinite(self.value):
            raise InvalidVariance("estimate value must be finite")
        if not np.isfinite(self.variance) or self.variance <= 0.0:
            raise InvalidVariance(f"variance must be positive and finite, got {self.variance!r}")


def fuse(prior: ParamEstimate, online: ParamEstimate) -> ParamEstimate:
    """Inverse-variance weighted fusion of two independent Gaussian estimates.

    value = (v_p / s_p + v_o / s_o) / (1/s_p + 1/s_o), variance = 1 / (1/s_p + 1/s_o).
    """
    wp = 1.0 / prior.variance
    wo = 1.0 / online.variance
    value = (prior.value * wp + online.value * wo) / (wp + wo)
    return ParamEstimate(value=value, variance=1.0 / (wp + wo), source="fused")


@dataclass(frozen=True)
class PriorRecord:
    image_id: str
    query_id: str
    value_norm: float
    sigma_norm: float

    def __post_init__(self):
        if not (-1.0 <= self.value_norm <= 1.0):
            raise InvalidVariance(f"value_norm {self.value_norm} outside [-1, 1]")
        if not (np.isfinite(self.sigma_norm) and self.sigma_norm > 0.0):
            raise InvalidVariance("sigma_norm must be positive and finite")


@dataclass(frozen=True)
class PriorQuerySet:
    """Scored visual queries: normalized value/spread pairs and a metric scale."""

    scale_m: float
    records: tuple[PriorRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if not (np.isfinite(self.scale_m) and self.scale_m > 0.0):
            raise InvalidVariance("scale_m must be positive and finite")


def aggregate_prior(queries: PriorQuerySet) -> ParamEstimate:
    """Average the normalized answers, then scale: value and sigma both mean-aggregated."""
    if len(queries.records) == 0:
        raise EmptyPrior("prior query set holds no records")
    values = np.array([r.value_norm for r in queries.records])
    sigmas = np.array([r.sigma_norm for r in queries.records])
    value = queries.scale_m * float(np.mean(values))
    sigma = queries.scale_m * float(np.mean(sigmas))
    return ParamEstimate(value=value, variance=sigma * sigma, source="prior")


def prior_set_from_dict(doc: dict) -> PriorQuerySet:
    try:
        records = tuple(
            PriorRecord(
                image_id=str(r["image_id"]),
                query_id=str(r["query_id"]),
                value_norm=float(r["value_norm"]),
                sigma_norm=float(r["sigma_norm"]),
            )
            for r in doc["records"]
        )
        return PriorQuerySet(scale_m=float(doc["scale_m"]), records=records)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed prior query document: {exc}") from exc


def load_prior_set(path) -> PriorQuerySet:
    with open(path) as f:
        return prior_set_from_dict(json.load(f))


def save_prior_set(path, queries: PriorQuerySet) -> None:
    doc = {
        "scale_m": queries.scale_m,
        "records": [
            {"image_id": r.image_id, "query_id": r.query_id, "value_norm": r.value_norm, "sigma_norm": r.sigma_norm}
            for r in queries.records
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


class HistoryWindow:
    """Ring buffer of the last k (state, previous action) rows, zero-padded.

    as_input() lays out rows oldest-first followed by a k-long validity mask.
    """

    def __init__(self, k: int = HISTORY_STEPS, step_dim: int = STEP_FEATURES):
        if k < 1 or step_dim < 1:
            raise ShapeError("window length and step dim must be positive")
        self.k = k
        self.step_dim = step_dim
        self.rows = np.zeros((k, step_dim))
        self.valid_len = 0

    @property
    def input_dim(self) -> int:
        return self.k * self.step_dim + self.k

    def reset(self) -> None:
        self.rows[...] = 0.0
        self.valid_len = 0

    def push(self, state_feats: np.ndarray, prev_action: np.ndarray) -> None:
        row = np.concatenate([np.asarray(state_feats, dtype=np.float64).ravel(), np.asarray(prev_action, dtype=np.float64).ravel()])
        if row.shape != (self.step_dim,):
            raise ShapeError(f"window rows must have {self.step_dim} features, got {row.shape[0]}")
        self.rows = np.roll(self.rows, -1, axis=0)
        self.rows[-1] = row
        self.valid_len = min(self.valid_len + 1, self.k)

    def as_input(self) -> np.ndarray:
        mask = np.zeros(self.k)
        if self.valid_len > 0:
            mask[-self.valid_len :] = 1.0
        flat = (self.rows * mask[:, None]).ravel()
        return np.concatenate([flat, mask])


def stack_windows(windows: list[HistoryWindow]) -> np.ndarray:
    return np.stack([w.as_input() for w in windows], axis=0)


class AdaptationEnsemble:
    """Independently initialized Gaussian regressors over history windows."""

    def __init__(self, n_members: int, input_dim: int, hidden: list[int], seed: int):
        if n_members < 2:
            raise EnsembleTooSmall("need at least two members to measure disagreement")
        self.input_dim = input_dim
        seqs = np.random.SeedSequence(seed).spawn(n_members)
        self.members = [
            GaussianHead(input_dim, hidden, np.random.Generator(np.random.PCG64(s))) for s in seqs
        ]

    @property
    def n_members(self) -> int:
        return len(self.members)

    def predict(self, inputs: np.ndarray):
        """Per-batch (theta, var_epi, var_alea, var_total) from all members.

        theta    = mean_i mu_i
        var_epi  = mean_i (mu_i - theta)^2
        var_alea = mean_i var_i
        """
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[1] != self.input_dim:
            raise ShapeError(f"expected (batch, {self.input_dim}) inputs, got {inputs.shape}")
        mus = []
        vars_ = []
        for m in self.members:
            mu, var = m.predict(inputs)
            mus.append(mu)
            vars_.append(var)
        mu_mat = np.stack(mus, axis=0)
        var_mat = np.stack(vars_, axis=0)
        theta = np.mean(mu_mat, axis=0)
        var_epi = np.mean((mu_mat - theta) ** 2, axis=0)
        var_alea = np.mean(var_mat, axis=0)
        return theta, var_epi, var_alea, var_epi + var_alea


def ensemble_estimate(ens: AdaptationEnsemble, window: HistoryWindow):
    """(theta, var_epi, var_alea, var_total) for one history window."""
    if window.valid_len < 1:
        raise ShapeError("history window is empty")
    theta, var_epi, var_alea, var_total = ens.predict(window.as_input()[None, :])
    return float(theta[0]), float(var_epi[0]), float(var_alea[0]), float(var_total[0])


@dataclass
class WindowDataset:
    """Flattened window inputs with labels and contact annotations."""

    inputs: np.ndarray        # (M, input_dim)
    labels: np.ndarray        # (M,)
    contact_frac: np.ndarray  # (M,) fraction of valid steps in contact
    pre_contact: np.ndarray   # (M,) bool, no contact seen yet this episode
    episode_id: np.ndarray    # (M,)

    def __post_init__(self):
        m = self.inputs.shape[0]
        for arr in (self.labels, self.contact_frac, self.pre_contact, self.episode_id):
            if arr.shape[0] != m:
                raise DataError("window dataset columns are misaligned")


def windows_from_records(records, labels=None, k: int = HISTORY_STEPS) -> WindowDataset:
    """Slide a k-step window over each episode record, one sample per step."""
    if labels is not None and len(labels) != len(records):
        raise DataError(f"{len(labels)} labels for {len(records)} episodes")
    inputs = []
    out_labels = []
    contact_frac = []
    pre_contact = []
    episode_id = []
    for e_idx, rec in enumerate(records):
        label = float(labels[e_idx]) if labels is not None else rec.true_com
        if labels is not None and abs(label - rec.true_com) > 1e-9:
            raise DataError(f"label {label} disagrees with episode {e_idx} parameter {rec.true_com}")
        w = HistoryWindow(k=k)
        seen_contact = False
        contact_hist: list[bool] = []
        for t in range(rec.length):
            prev_a = rec.actions[t - 1] if t > 0 else np.zeros(2)
            w.push(rec.feats[t], prev_a)
            contact_hist.append(bool(rec.contact[t - 1]) if t > 0 else False)
            window_contacts = contact_hist[-w.valid_len :]
            inputs.append(w.as_input())
            out_labels.append(label)
            contact_frac.append(float(np.mean(window_contacts)))
            pre_contact.append(not seen_contact)
            episode_id.append(e_idx)
            seen_contact = seen_contact or bool(rec.contact[t])
    if not inputs:
        raise DataError("no windows could be built from the records")
    return WindowDataset(
        inputs=np.array(inputs),
        labels=np.array(out_labels),
        contact_frac=np.array(contact_frac),
        pre_contact=np.array(pre_contact, dtype=bool),
        episode_id=np.array(episode_id, dtype=np.int64),
    )


def train_ensemble(
    ens: AdaptationEnsemble,
    dataset: WindowDataset,
    epochs: int,
    seed: int,
    batch_size: int = 512,
    lr: float = 1e-3,
) -> dict:
    """Fit every member by Gaussian NLL on independently shuffled minibatches."""
    m = dataset.inputs.shape[0]
    if dataset.inputs.shape[1] != ens.input_dim:
        raise DataError(f"dataset input dim {dataset.inputs.shape[1]} != ensemble dim {ens.input_dim}")
    member_seeds = np.random.SeedSequence(seed).spawn(ens.n_members)
    losses = []
    for member, mseed in zip(ens.members, member_seeds):
        rng = np.random.Generator(np.random.PCG64(mseed))
        opt = Adam(member.params(), lr=lr)
        last = 0.0
        for _ in range(epochs):
            order = rng.permutation(m)
            for start in range(0, m, batch_size):
                idx = order[start : start + batch_size]
                loss, grads = member.nll_and_grads(dataset.inputs[idx], dataset.labels[idx])
                opt.step(member.params(), grads)
                last = loss
        losses.append(last)
    return {"member_final_nll": losses}


class OnlineEstimator:
    """Fuses the fixed prior with the rolling-window ensemble estimate each step.

    Before the first step the fused estimate is the prior itself. When no prior
    is supplied the ensemble output is used alone from the very first step
    (evaluated on the single pushed row). Conditioning values are clamped to
    the parameter range; clamp events are counted.
    """

    def __init__(
        self,
        ens: AdaptationEnsemble,
        prior: ParamEstimate | None,
        com_range: tuple[float, float],
        k: int = HISTORY_STEPS,
    ):
        self.ens = ens
        self.prior = prior
        self.window = HistoryWindow(k=k)
        self.com_range = com_range
        self.steps = 0
        self.clamp_count = 0

    def reset(self) -> None:
        self.window.reset()
        self.steps = 0

    def step(self, state_feats: np.ndarray, prev_action: np.ndarray) -> dict:
        """Push the newest row and return the estimate trace for this step."""
        self.window.push(state_feats, prev_action)
        first = self.steps == 0
        self.steps += 1
        trace: dict[str, float] = {k: float("nan") for k in
                                   ("theta_prior", "sigma_prior", "theta_rma", "sigma_epi", "sigma_alea", "theta_fused", "sigma_fused")}
        if self.prior is not None:
            trace["theta_prior"] = self.prior.value
            trace["sigma_prior"] = float(np.sqrt(self.prior.variance))
        if first and self.prior is not None:
            fused = self.prior
        else:
            theta, var_epi, var_alea, var_total = ensemble_estimate(self.ens, self.window)
            online = ParamEstimate(theta, var_total, source="ensemble")
            trace["theta_rma"] = theta
            trace["sigma_epi"] = float(np.sqrt(var_epi))
            trace["sigma_alea"] = float(np.sqrt(var_alea))
            fused = fuse(self.prior, online) if self.prior is not None else online
        lo, hi = self.com_range
        value = float(np.clip(fused.value, lo, hi))
        if value != fused.value:
            self.clamp_count += 1
        trace["theta_fused"] = value
        trace["sigma_fused"] = float(np.sqrt(fused.variance))
        return trace
