"""Seeded synthetic cohorts with planted ground truth.

Covariate marginals follow the study population (age 62.4 ± 11.6 years,
78% men, 30% on statins, 77% hypertensive). Metabolites are log-normal with
block-correlated log-scale values; age and statin use shift both the
metabolites and the outcome odds, so covariate adjustment carries real
information. Metabolites of one block share their covariate loadings, and
the block correlation is the total correlation after those shifts. The
outcome intercept is calibrated by bisection on a fixed set of uniforms
until the empirical prevalence matches the target.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np
from scipy.special import expit

from cad_predictor.cohort import CohortSchema, CohortTable
from cad_predictor.config.models import SynthConfig
from cad_predictor.core.exceptions import InfeasibleConfigError
from cad_predictor.core.rng import SYNTH_STREAM, make_rng

logger = logging.getLogger(__name__)

AGE_MEAN = 62.4
AGE_SD = 11.6
MALE_RATE = 0.78
STATIN_RATE = 0.30
HYPERTENSION_RATE = 0.77

COVARIATE_NAMES = ("age", "sex", "statins", "hypertension")
OUTCOME_NAME = "cad"
ID_NAME = "participant_id"

# Outcome log-odds per unit of each centred covariate (age per SD), before confounder_strength.
COVARIATE_EFFECTS = {"age": 1.0, "sex": 0.8, "statins": 0.6, "hypertension": 0.5}
BISECTION_STEPS = 80


def metabolite_names(n_metabolites: int) -> Tuple[str, ...]:
    width = max(3, len(str(n_metabolites)))
    return tuple(f"m{j:0{width}d}" for j in range(1, n_metabolites + 1))


def synth_schema(n_metabolites: int) -> CohortSchema:
    return CohortSchema(
        outcome_name=OUTCOME_NAME,
        covariate_names=COVARIATE_NAMES,
        metabolite_names=metabolite_names(n_metabolites),
        id_name=ID_NAME,
    )


@dataclass(frozen=True)
class GroundTruth:
    """The generating model behind a synthetic cohort."""

    intercept: float
    metabolite_coefficients: np.ndarray
    covariate_coefficients: Dict[str, float]
    true_support: Tuple[int, ...]
    true_names: Tuple[str, ...]
    blocks: Tuple[Tuple[int, ...], ...]
    age_loadings: np.ndarray
    statin_loadings: np.ndarray
    prevalence: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "intercept": self.intercept,
            "metabolite_coefficients": self.metabolite_coefficients.tolist(),
            "covariate_coefficients": dict(self.covariate_coefficients),
            "true_support": list(self.true_support),
            "true_names": list(self.true_names),
            "blocks": [list(block) for block in self.blocks],
            "age_loadings": self.age_loadings.tolist(),
            "statin_loadings": self.statin_loadings.tolist(),
            "prevalence": self.prevalence,
        }

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")


def _block_latents(
    raw: np.ndarray,
    blocks: List[Tuple[int, float]],
    age_loadings: np.ndarray,
    statin_loadings: np.ndarray,
) -> Tuple[np.ndarray, Tuple[Tuple[int, ...], ...]]:
    """Correlate ``raw`` block by block.

    Members of a block share the loadings of its first metabolite. The
    Cholesky correlation is lowered by the shared confounder variance so
    that, once the covariate shifts are added, the total within-block
    correlation equals the block's target. Loadings too large for the target
    are scaled down until the Cholesky correlation reaches zero. Loadings are
    updated in place.
    """
    latent = raw.copy()
    members = []
    start = 0
    for size, rho in blocks:
        block = slice(start, start + size)
        age, statin = age_loadings[start], statin_loadings[start]
        shared = age**2 + statin**2
        bound = rho / (1.0 - rho)
        if shared > bound:
            scale = np.sqrt(bound / shared)
            age, statin, shared = age * scale, statin * scale, bound
        age_loadings[block] = age
        statin_loadings[block] = statin
        inner = max(0.0, rho * (1.0 + shared) - shared)
        correlation = np.full((size, size), inner) + np.eye(size) * (1.0 - inner)
        factor = np.linalg.cholesky(correlation)
        latent[:, block] = raw[:, block] @ factor.T
        members.append(tuple(range(start, start + size)))
        start += size
    return latent, tuple(members)


def _calibrate_intercept(linear: np.ndarray, uniforms: np.ndarray, prevalence: float) -> float:
    def rate(intercept: float) -> float:
        return float(np.mean(uniforms < expit(intercept + linear)))

    low, high = -30.0, 30.0
    for _ in range(BISECTION_STEPS):
        middle = (low + high) / 2.0
        if rate(middle) < prevalence:
            low = middle
        else:
            high = middle
    return min((low, high), key=lambda b: (abs(rate(b) - prevalence), b))


def generate(config: SynthConfig) -> Tuple[CohortTable, GroundTruth]:
    """Draw a cohort and its ground truth from ``config``.

    Raises:
        InfeasibleConfigError: If the blocks or the true support do not fit
            into ``n_metabolites``.
    """
    n, p = config.n_rows, config.n_metabolites
    blocks = [(int(size), float(rho)) for size, rho in config.block_structure]
    if sum(size for size, _ in blocks) > p:
        raise InfeasibleConfigError(
            f"Block sizes sum to {sum(size for size, _ in blocks)} > {p} metabolites",
            context={"blocks": blocks, "n_metabolites": p},
        )
    if config.n_true_metabolites > p:
        raise InfeasibleConfigError(
            f"{config.n_true_metabolites} true metabolites requested out of {p}",
            context={"n_true_metabolites": config.n_true_metabolites, "n_metabolites": p},
        )

    rng = make_rng(config.seed, SYNTH_STREAM)
    age = rng.normal(AGE_MEAN, AGE_SD, n)
    sex = (rng.random(n) < MALE_RATE).astype(np.float64)
    statins = (rng.random(n) < STATIN_RATE).astype(np.float64)
    hypertension = (rng.random(n) < HYPERTENSION_RATE).astype(np.float64)
    centred = {
        "age": (age - AGE_MEAN) / AGE_SD,
        "sex": sex - MALE_RATE,
        "statins": (statins - STATIN_RATE) / np.sqrt(STATIN_RATE * (1.0 - STATIN_RATE)),
        "hypertension": hypertension - HYPERTENSION_RATE,
    }

    raw = rng.standard_normal((n, p))
    strength = config.confounder_strength
    age_loadings = strength * rng.uniform(-1.0, 1.0, p)
    statin_loadings = strength * rng.uniform(-1.0, 1.0, p)
    latent, members = _block_latents(raw, blocks, age_loadings, statin_loadings)
    latent += np.outer(centred["age"], age_loadings) + np.outer(centred["statins"], statin_loadings)
    # Unit variance per metabolite; rescaling keeps every correlation.
    scale = np.sqrt(1.0 + age_loadings**2 + statin_loadings**2)
    latent /= scale
    age_loadings /= scale
    statin_loadings /= scale
    log_means = rng.uniform(-1.0, 2.0, p)
    metabolites = np.exp(log_means + config.log_scale_sd * latent)

    support = np.sort(rng.permutation(p)[: config.n_true_metabolites])
    coefficients = np.zeros(p)
    signs = np.where(rng.random(support.size) < 0.5, -1.0, 1.0)
    coefficients[support] = signs * config.effect_size
    covariate_coefficients = {name: strength * effect for name, effect in COVARIATE_EFFECTS.items()}

    linear = latent @ coefficients + sum(covariate_coefficients[name] * centred[name] for name in COVARIATE_NAMES)
    uniforms = rng.random(n)
    intercept = _calibrate_intercept(linear, uniforms, config.prevalence)
    outcome = (uniforms < expit(intercept + linear)).astype(np.int8)

    missing = np.zeros((n, len(COVARIATE_NAMES) + p), dtype=bool)
    missing[:, len(COVARIATE_NAMES) :] = rng.random((n, p)) < config.missing_rate

    schema = synth_schema(p)
    values = np.column_stack([age, sex, statins, hypertension, metabolites])
    ids = np.array([f"P{i:05d}" for i in range(1, n + 1)], dtype=object)
    table = CohortTable(values=values, missing=missing, outcome=outcome, schema=schema, ids=ids)

    truth = GroundTruth(
        intercept=float(intercept),
        metabolite_coefficients=coefficients,
        covariate_coefficients=covariate_coefficients,
        true_support=tuple(int(j) for j in support),
        true_names=tuple(schema.metabolite_names[j] for j in support),
        blocks=members,
        age_loadings=age_loadings,
        statin_loadings=statin_loadings,
        prevalence=float(outcome.mean()),
    )
    logger.info(
        "Generated %d x %d cohort: prevalence %.3f, %d true metabolites, %.1f%% metabolite cells missing",
        n,
        p,
        truth.prevalence,
        support.size,
        100.0 * missing[:, len(COVARIATE_NAMES) :].mean(),
    )
    return table, truth
