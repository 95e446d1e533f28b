//! Positive-sample memory: one domain-level feature per lane class.
//!
//! Each domain keeps a `C x D` bank. A class row is initialized from the mean
//! of the first non-empty anchor set it sees, then moves toward a
//! similarity-weighted aggregate of later anchors with an annealed EMA
//! factor. Classes are addressed `1..=C`, matching the label convention.

use crate::error::{Domain, Error, Result};
use crate::tensor::ops::cosine_similarity;

pub const DEFAULT_T0: f64 = 0.9;
pub const DEFAULT_POWER: f64 = 0.9;

/// Below this the aggregation weights are undefined and the row is left alone.
const NO_UPDATE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    domain: Domain,
    num_classes: usize,
    dim: usize,
    features: Vec<f64>,
    initialized: Vec<bool>,
    pub t0: f64,
    pub power: f64,
}

/// Annealed EMA factor `(1 - m/T)^p * (t0 - t0/100) + t0/100`; `m` past `T`
/// clamps to the floor `t0/100`.
pub fn schedule_t(m: u64, total: u64, t0: f64, power: f64) -> f64 {
    let floor = t0 / 100.0;
    if total == 0 || m >= total {
        return floor;
    }
    if m == 0 {
        return t0;
    }
    let frac = 1.0 - m as f64 / total as f64;
    frac.powf(power) * (t0 - floor) + floor
}

/// Cosine similarity of every anchor with the bank row.
pub fn similarity_vector(anchors: &[Vec<f64>], memory_row: &[f64]) -> Result<Vec<f64>> {
    anchors
        .iter()
        .map(|a| cosine_similarity(a, memory_row))
        .collect()
}

/// Weighted mean of anchors with weights proportional to `1 - S(i)`, so
/// anchors far from the current row dominate. Returns `None` when every
/// anchor already coincides with the row.
pub fn aggregate_anchors(anchors: &[Vec<f64>], similarities: &[f64]) -> Result<Option<Vec<f64>>> {
    if anchors.is_empty() || anchors.len() != similarities.len() {
        return Err(Error::shape(
            "aggregate_anchors",
            format!("{} anchors, {} similarities", anchors.len(), similarities.len()),
        ));
    }
    let weights: Vec<f64> = similarities
        .iter()
        .map(|&s| {
            debug_assert!(s <= 1.0 + 1e-12, "similarity {s} above 1");
            1.0 - s.min(1.0)
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if total < NO_UPDATE_EPS {
        return Ok(None);
    }
    let dim = anchors[0].len();
    let mut out = vec![0.0; dim];
    for (a, w) in anchors.iter().zip(&weights) {
        let w = w / total;
        for (o, v) in out.iter_mut().zip(a) {
            *o += w * v;
        }
    }
    Ok(Some(out))
}

impl MemoryBank {
    pub fn new(domain: Domain, num_classes: usize, dim: usize) -> Self {
        Self::with_schedule(domain, num_classes, dim, DEFAULT_T0, DEFAULT_POWER)
    }

    pub fn with_schedule(domain: Domain, num_classes: usize, dim: usize, t0: f64, power: f64) -> Self {
        Self {
            domain,
            num_classes,
            dim,
            features: vec![0.0; num_classes * dim],
            initialized: vec![false; num_classes],
            t0,
            power,
        }
    }

    pub(crate) fn from_parts(
        domain: Domain,
        num_classes: usize,
        dim: usize,
        features: Vec<f64>,
        initialized: Vec<bool>,
        t0: f64,
        power: f64,
    ) -> Result<Self> {
        if features.len() != num_classes * dim || initialized.len() != num_classes {
            return Err(Error::Data(format!(
                "bank payload of {} values / {} flags for {num_classes}x{dim}",
                features.len(),
                initialized.len()
            )));
        }
        Ok(Self {
            domain,
            num_classes,
            dim,
            features,
            initialized,
            t0,
            power,
        })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        (1..=self.num_classes).contains(&class) && self.initialized[class - 1]
    }

    pub fn initialized_flags(&self) -> &[bool] {
        &self.initialized
    }

    pub fn all_initialized(&self) -> bool {
        self.initialized.iter().all(|&f| f)
    }

    pub fn raw_features(&self) -> &[f64] {
        &self.features
    }

    fn check(&self, domain: Domain, class: usize) -> Result<()> {
        if domain != self.domain {
            return Err(Error::DomainMismatch {
                expected: self.domain,
                found: domain,
            });
        }
        if !(1..=self.num_classes).contains(&class) {
            return Err(Error::shape(
                "memory_bank",
                format!("class {class} outside 1..={}", self.num_classes),
            ));
        }
        Ok(())
    }

    /// Row of class `c`; the caller must know it is initialized.
    pub(crate) fn row(&self, class: usize) -> &[f64] {
        &self.features[(class - 1) * self.dim..class * self.dim]
    }

    /// Seeds class `c` with the mean of `anchors`. Empty anchors leave it
    /// uninitialized; an already initialized class is not touched.
    pub fn initialize_class(&mut self, domain: Domain, class: usize, anchors: &[Vec<f64>]) -> Result<bool> {
        self.check(domain, class)?;
        if anchors.is_empty() || self.initialized[class - 1] {
            return Ok(false);
        }
        let mut mean = vec![0.0; self.dim];
        for a in anchors {
            if a.len() != self.dim {
                return Err(Error::shape("initialize_class", format!("anchor of length {}", a.len())));
            }
            for (m, v) in mean.iter_mut().zip(a) {
                *m += v;
            }
        }
        let n = anchors.len() as f64;
        for m in &mut mean {
            *m /= n;
        }
        self.features[(class - 1) * self.dim..class * self.dim].copy_from_slice(&mean);
        self.initialized[class - 1] = true;
        Ok(true)
    }

    /// One EMA step of class `c` using the factor `t_{m-1}` of the schedule.
    /// Returns whether the row moved.
    pub fn update_class(
        &mut self,
        domain: Domain,
        class: usize,
        anchors: &[Vec<f64>],
        m: u64,
        total: u64,
    ) -> Result<bool> {
        let t = schedule_t(m.saturating_sub(1), total, self.t0, self.power);
        self.update_class_with_factor(domain, class, anchors, t)
    }

    pub fn update_class_with_factor(
        &mut self,
        domain: Domain,
        class: usize,
        anchors: &[Vec<f64>],
        t: f64,
    ) -> Result<bool> {
        self.check(domain, class)?;
        if !self.initialized[class - 1] {
            return Err(Error::BankNotWarmedUp {
                domain: self.domain,
                class,
            });
        }
        if anchors.is_empty() {
            return Ok(false);
        }
        let sims = similarity_vector(anchors, self.row(class))?;
        let Some(agg) = aggregate_anchors(anchors, &sims)? else {
            return Ok(false);
        };
        let row = &mut self.features[(class - 1) * self.dim..class * self.dim];
        for (r, a) in row.iter_mut().zip(&agg) {
            *r = t * *r + (1.0 - t) * a;
        }
        Ok(true)
    }

    /// Initializes or updates class `c` depending on its state.
    pub fn absorb(&mut self, domain: Domain, class: usize, anchors: &[Vec<f64>], m: u64, total: u64) -> Result<()> {
        if self.is_initialized(class) {
            self.update_class(domain, class, anchors, m, total)?;
        } else {
            self.initialize_class(domain, class, anchors)?;
        }
        Ok(())
    }

    /// Copy of the domain-level feature of class `c`.
    pub fn get_positive(&self, class: usize) -> Result<Vec<f64>> {
        if !(1..=self.num_classes).contains(&class) || !self.initialized[class - 1] {
            return Err(Error::BankNotWarmedUp {
                domain: self.domain,
                class,
            });
        }
        Ok(self.row(class).to_vec())
    }

    pub fn ensure_warm(&self) -> Result<()> {
        match self.initialized.iter().position(|&f| !f) {
            Some(i) => Err(Error::BankNotWarmedUp {
                domain: self.domain,
                class: i + 1,
            }),
            None => Ok(()),
        }
    }
}

/// The source and target banks used together by the loss and by DFA.
#[derive(Clone, Debug, PartialEq)]
pub struct BankPair {
    pub source: MemoryBank,
    pub target: MemoryBank,
}

impl BankPair {
    pub fn new(num_classes: usize, dim: usize, t0: f64, power: f64) -> Self {
        Self {
            source: MemoryBank::with_schedule(Domain::Source, num_classes, dim, t0, power),
            target: MemoryBank::with_schedule(Domain::Target, num_classes, dim, t0, power),
        }
    }

    pub fn all_initialized(&self) -> bool {
        self.source.all_initialized() && self.target.all_initialized()
    }

    pub fn get(&self, domain: Domain) -> &MemoryBank {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn get_mut(&mut self, domain: Domain) -> &mut MemoryBank {
        match domain {
            Domain::Source => &mut self.source,
            Domain::Target => &mut self.target,
        }
    }

    /// `(own, other)` seen from anchors of `domain`.
    pub fn own_and_other(&self, domain: Domain) -> (&MemoryBank, &MemoryBank) {
        match domain {
            Domain::Source => (&self.source, &self.target),
            Domain::Target => (&self.target, &self.source),
        }
    }
}
