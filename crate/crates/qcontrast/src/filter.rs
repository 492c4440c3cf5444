//! Separates preference-based disagreements from ability-based ones.
//!
//! A disagreement is preference-based when both policies are confident at
//! the disagreement state (mean max-softmax of the raw Q vectors above
//! `alpha`), value the state similarly, and value their own branch outcomes
//! similarly. State values are simulated as the max of the Q vector after
//! normalizing each policy's Q range to [0, 1] across the whole set, so the
//! two policies' scales become comparable.

use crate::disagreement::{Disagreement, DisagreementSet, Provenance};
use crate::error::{Error, Result};
use crate::wire::{self, Reader, Writer};
use crate::env::NUM_ACTIONS;

/// Thresholds for the three preference conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterThresholds {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            beta: 0.1,
            gamma: 0.1,
        }
    }
}

impl FilterThresholds {
    /// `alpha` must exceed the uniform-softmax floor 1/5 and not exceed 1.
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let t = Self { alpha, beta, gamma };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.2 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0.2, 1.0], got {}",
                self.alpha
            )));
        }
        if self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("beta and gamma must be non-negative".into()));
        }
        Ok(())
    }
}

fn max_softmax(q: &[f64; NUM_ACTIONS]) -> f64 {
    let max = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = q.iter().map(|v| (v - max).exp()).sum();
    1.0 / sum
}

/// State importance: how confidently the two policies commit to their
/// (different) decisions. Mean of the max softmax of the two raw Q vectors;
/// always in [1/5, 1].
pub fn state_importance(q_a: &[f64; NUM_ACTIONS], q_b: &[f64; NUM_ACTIONS]) -> f64 {
    (max_softmax(q_a) + max_softmax(q_b)) / 2.0
}

/// Affine map of one policy's observed Q range onto [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QNormalizer {
    min: f64,
    max: f64,
}

impl QNormalizer {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut any = false;
        for v in values {
            any = true;
            min = min.min(v);
            max = max.max(v);
        }
        if !any {
            return Err(Error::Stats("cannot fit a normalizer on no Q values".into()));
        }
        Ok(Self { min, max })
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    /// Degenerate ranges (max == min) map everything to 0.5.
    pub fn normalize(&self, v: f64) -> f64 {
        if self.max > self.min {
            (v - self.min) / (self.max - self.min)
        } else {
            0.5
        }
    }
}

/// Which policy's Q values to aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicySide {
    A,
    B,
}

/// Min/max over every cached Q entry of one policy in the set (both the
/// disagreement-state vectors and that policy's outcome vectors).
pub fn fit_normalizer(ds: &DisagreementSet, side: PolicySide) -> Result<QNormalizer> {
    if ds.is_empty() {
        return Err(Error::Stats("cannot fit a normalizer on an empty set".into()));
    }
    QNormalizer::fit(ds.records.iter().flat_map(|d| {
        let (state_q, outcome_q) = match side {
            PolicySide::A => (&d.q_a_state, &d.q_a_outcome),
            PolicySide::B => (&d.q_b_state, &d.q_b_outcome),
        };
        state_q.iter().chain(outcome_q.iter()).copied().collect::<Vec<_>>()
    }))
}

/// Simulated state value: max entry of the normalized Q vector.
pub fn value_estimate(q: &[f64; NUM_ACTIONS], norm: &QNormalizer) -> f64 {
    q.iter()
        .map(|&v| norm.normalize(v))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Per-record filter diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Diagnostics {
    pub importance: f64,
    pub dv_state: f64,
    pub dv_outcome: f64,
}

/// Evaluates the three preference conditions for one record.
pub fn is_preference_based(
    d: &Disagreement,
    norm_a: &QNormalizer,
    norm_b: &QNormalizer,
    t: &FilterThresholds,
) -> (bool, Diagnostics) {
    let importance = state_importance(&d.q_a_state, &d.q_b_state);
    let dv_state =
        (value_estimate(&d.q_a_state, norm_a) - value_estimate(&d.q_b_state, norm_b)).abs();
    let dv_outcome =
        (value_estimate(&d.q_a_outcome, norm_a) - value_estimate(&d.q_b_outcome, norm_b)).abs();
    let pass = importance > t.alpha && dv_state < t.beta && dv_outcome < t.gamma;
    (
        pass,
        Diagnostics {
            importance,
            dv_state,
            dv_outcome,
        },
    )
}

/// A filtered record: the disagreement plus its diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceRecord {
    pub disagreement: Disagreement,
    pub diagnostics: Diagnostics,
}

/// The preference-based subset of a disagreement set.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceSet {
    pub records: Vec<PreferenceRecord>,
    pub thresholds: FilterThresholds,
    pub provenance: Provenance,
}

impl PreferenceSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Drops diagnostics, turning the subset back into a plain set.
    pub fn to_disagreement_set(&self) -> DisagreementSet {
        DisagreementSet {
            records: self.records.iter().map(|r| r.disagreement.clone()).collect(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Fits both normalizers on the full set, then keeps the records passing all
/// three conditions, in their original order.
pub fn filter(ds: &DisagreementSet, t: &FilterThresholds) -> Result<PreferenceSet> {
    t.validate()?;
    if ds.is_empty() {
        return Err(Error::Stats("cannot filter an empty disagreement set".into()));
    }
    let norm_a = fit_normalizer(ds, PolicySide::A)?;
    let norm_b = fit_normalizer(ds, PolicySide::B)?;
    let records = ds
        .records
        .iter()
        .filter_map(|d| {
            let (pass, diagnostics) = is_preference_based(d, &norm_a, &norm_b, t);
            pass.then(|| PreferenceRecord {
                disagreement: d.clone(),
                diagnostics,
            })
        })
        .collect();
    Ok(PreferenceSet {
        records,
        thresholds: *t,
        provenance: ds.provenance.clone(),
    })
}

const PREF_MAGIC: &[u8; 4] = b"QPRF";
const PREF_VERSION: u32 = 1;

/// Preference-set file: the disagreement-set layout plus thresholds and
/// per-record diagnostic columns.
pub fn save_preference_set(ps: &PreferenceSet, path: &std::path::Path) -> Result<()> {
    let mut w = Writer::new();
    w.put_bytes(PREF_MAGIC);
    w.put_u32(PREF_VERSION);
    w.put_f64(ps.thresholds.alpha);
    w.put_f64(ps.thresholds.beta);
    w.put_f64(ps.thresholds.gamma);
    crate::disagreement::encode_provenance(&mut w, &ps.provenance);
    w.put_u64(ps.records.len() as u64);
    for r in &ps.records {
        crate::disagreement::encode_record(&mut w, &r.disagreement);
        w.put_f64(r.diagnostics.importance);
        w.put_f64(r.diagnostics.dv_state);
        w.put_f64(r.diagnostics.dv_outcome);
    }
    std::fs::write(path, w.into_bytes())?;
    Ok(())
}

pub fn load_preference_set(path: &std::path::Path) -> Result<PreferenceSet> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes);
    wire::expect_header(&mut r, PREF_MAGIC, PREF_VERSION)?;
    let thresholds = FilterThresholds::new(r.get_f64()?, r.get_f64()?, r.get_f64()?)?;
    let provenance = crate::disagreement::decode_provenance(&mut r)?;
    let count = r.get_u64()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        let disagreement = crate::disagreement::decode_record(&mut r, provenance.branch_len)?;
        let diagnostics = Diagnostics {
            importance: r.get_f64()?,
            dv_state: r.get_f64()?,
            dv_outcome: r.get_f64()?,
        };
        records.push(PreferenceRecord {
            disagreement,
            diagnostics,
        });
    }
    r.finish()?;
    Ok(PreferenceSet {
        records,
        thresholds,
        provenance,
    })
}
