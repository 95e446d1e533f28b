//! Cross-domain contrastive loss.
//!
//! Anchors are confident, labeled pixel features of one lane class. Each
//! anchor is contrasted against one positive (a memory-bank row) and `N`
//! negatives drawn per anchor from a class-specific pool. The intra-domain
//! term takes the positive from the anchors' own bank, the inter-domain term
//! from the other domain's bank. Only anchors carry gradient.

use rand::seq::index;
use rand::Rng;

use crate::error::{Domain, Error, Result};
use crate::labels::ClassMap;
use crate::psmm::{BankPair, MemoryBank};
use crate::tensor::{ops, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastConfig {
    /// Anchors kept per class (`M`).
    pub anchors_per_class: usize,
    /// Negatives per anchor (`N`).
    pub negatives_per_anchor: usize,
    pub tau: f64,
    /// Minimum student confidence for a pixel to become an anchor.
    pub mu_c: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            anchors_per_class: 32,
            negatives_per_anchor: 8,
            tau: 0.07,
            mu_c: 0.2,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchors_per_class == 0 || self.negatives_per_anchor == 0 {
            return Err(Error::Config("anchors and negatives per anchor must be >= 1".into()));
        }
        if self.tau <= 0.0 || !(0.0..=1.0).contains(&self.mu_c) {
            return Err(Error::Config("tau must be > 0 and mu_c in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Pixels of class `class` whose predicted probability for that class is at
/// least `mu_c`, in scan order.
pub fn anchor_candidates(labels: &ClassMap, probs: &Tensor, class: usize, mu_c: f64) -> Vec<usize> {
    let hw = labels.len();
    let p = &probs.values()[(class - 1) * hw..class * hw];
    (0..hw)
        .filter(|&i| labels.get(i) as usize == class && p[i] >= mu_c)
        .collect()
}

/// Anchor positions per lane class (`result[c - 1]`), each subsampled to at
/// most `max_anchors` without replacement.
pub fn select_anchors<R: Rng + ?Sized>(
    labels: &ClassMap,
    probs: &Tensor,
    mu_c: f64,
    max_anchors: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    (1..=labels.num_lanes())
        .map(|c| {
            let cand = anchor_candidates(labels, probs, c, mu_c);
            if cand.len() <= max_anchors {
                cand
            } else {
                let mut picked: Vec<usize> = index::sample(rng, cand.len(), max_anchors)
                    .into_iter()
                    .map(|i| cand[i])
                    .collect();
                picked.sort_unstable();
                picked
            }
        })
        .collect()
}

fn draw<R: Rng + ?Sized>(pool: &[usize], count: usize, rng: &mut R) -> Vec<usize> {
    if pool.is_empty() || count == 0 {
        return Vec::new();
    }
    if pool.len() >= count {
        index::sample(rng, pool.len(), count).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..count).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Source-side negative pool: pixels of a lane other than `class`. Falls back
/// to background pixels when no other lane is present.
pub fn source_negative_pool(labels: &ClassMap, class: usize) -> Vec<usize> {
    let others: Vec<usize> = (0..labels.len())
        .filter(|&i| labels.is_lane(i) && labels.get(i) as usize != class)
        .collect();
    if !others.is_empty() {
        return others;
    }
    let bg = labels.background();
    (0..labels.len()).filter(|&i| labels.get(i) == bg).collect()
}

pub fn select_negatives_source<R: Rng + ?Sized>(
    labels: &ClassMap,
    class: usize,
    count: usize,
    rng: &mut R,
) -> Vec<usize> {
    draw(&source_negative_pool(labels, class), count, rng)
}

/// Target-side negative pool: pixels whose least likely class is `class`.
pub fn target_negative_pool(probs: &Tensor, class: usize) -> Vec<usize> {
    let (c, hw) = probs.chw_split();
    let v = probs.values();
    (0..hw)
        .filter(|&p| ops::argmin((0..c).map(|ch| v[ch * hw + p])) + 1 == class)
        .collect()
}

/// Target negatives; if no pixel has `class` as its argmin, takes the
/// `count` pixels with the lowest probability for `class`.
pub fn select_negatives_target<R: Rng + ?Sized>(
    probs: &Tensor,
    class: usize,
    count: usize,
    rng: &mut R,
) -> Vec<usize> {
    let pool = target_negative_pool(probs, class);
    if !pool.is_empty() {
        return draw(&pool, count, rng);
    }
    let hw = probs.chw_split().1;
    let p = &probs.values()[(class - 1) * hw..class * hw];
    let mut order: Vec<usize> = (0..hw).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

/// Anchors and negatives of one lane class in one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSamples {
    pub class: usize,
    pub anchor_positions: Vec<usize>,
    /// `anchor_positions.len() * negatives_per_anchor` detached features;
    /// anchor `p` owns the chunk `[p * N, (p + 1) * N)`.
    pub negatives: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSets {
    pub domain: Domain,
    pub negatives_per_anchor: usize,
    pub classes: Vec<ClassSamples>,
}

impl SampleSets {
    pub fn anchor_count(&self) -> usize {
        self.classes.iter().map(|c| c.anchor_positions.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor_count() == 0
    }

    /// Detached anchor features of `class`, read from `v`.
    pub fn anchor_features(&self, v: &Tensor, class: usize) -> Vec<Vec<f64>> {
        self.classes
            .iter()
            .filter(|c| c.class == class)
            .flat_map(|c| c.anchor_positions.iter().map(|&p| v.pixel(p)))
            .collect()
    }
}

/// Anchor and negative selection for one image of `domain`.
///
/// `labels` are ground truth for the source and filtered pseudo-labels for the
/// target; `probs` is the student softmax and `v` the representation map.
pub fn build_sample_sets<R: Rng + ?Sized>(
    domain: Domain,
    v: &Tensor,
    labels: &ClassMap,
    probs: &Tensor,
    cfg: &ContrastConfig,
    rng: &mut R,
) -> SampleSets {
    let anchors = select_anchors(labels, probs, cfg.mu_c, cfg.anchors_per_class, rng);
    let n = cfg.negatives_per_anchor;
    let classes = anchors
        .into_iter()
        .enumerate()
        .map(|(i, anchor_positions)| {
            let class = i + 1;
            let want = anchor_positions.len() * n;
            let mut neg_pos = if want == 0 {
                Vec::new()
            } else {
                match domain {
                    Domain::Source => select_negatives_source(labels, class, want, rng),
                    Domain::Target => select_negatives_target(probs, class, want, rng),
                }
            };
            // the lowest-probability fallback can return fewer than asked for
            if !neg_pos.is_empty() && neg_pos.len() < want {
                let short = neg_pos.clone();
                neg_pos = short.iter().copied().cycle().take(want).collect();
            }
            ClassSamples {
                class,
                anchor_positions,
                negatives: neg_pos.iter().map(|&p| v.pixel(p)).collect(),
            }
        })
        .collect();
    SampleSets {
        domain,
        negatives_per_anchor: n,
        classes,
    }
}

/// `-(1/M) sum_p log[e^{s+/tau} / (e^{s+/tau} + sum_q e^{s-_q/tau})]` with
/// cosine similarities, for one class.
pub fn info_nce(anchors: &[Vec<f64>], positive: &[f64], negatives: &[Vec<Vec<f64>>], tau: f64) -> Result<f64> {
    if anchors.is_empty() || anchors.len() != negatives.len() {
        return Err(Error::shape(
            "info_nce",
            format!("{} anchors with {} negative lists", anchors.len(), negatives.len()),
        ));
    }
    let mut total = 0.0;
    for (a, negs) in anchors.iter().zip(negatives) {
        let mut logits = vec![ops::cosine_similarity(a, positive)? / tau];
        for n in negs {
            logits.push(ops::cosine_similarity(a, n)? / tau);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[0];
    }
    Ok(total / anchors.len() as f64)
}

/// Summed (not averaged) InfoNCE of the anchor rows `anchors` (`[n, D]` on
/// the tape) against constant positives and negatives.
fn info_nce_sum(
    tape: &mut Tape,
    normalized_anchors: Var,
    positive: &[f64],
    negatives: &[Vec<f64>],
    per_anchor: usize,
    tau: f64,
) -> Result<Var> {
    let n = tape.value(normalized_anchors).shape()[0];
    let pos = ops::normalized(positive)?;
    let k = per_anchor + 1;
    let mut targets = Vec::with_capacity(n * k * pos.len());
    for p in 0..n {
        targets.extend_from_slice(&pos);
        for neg in &negatives[p * per_anchor..(p + 1) * per_anchor] {
            targets.extend(ops::normalized(neg)?);
        }
    }
    let dots = tape.row_dots(normalized_anchors, targets, k)?;
    let logits = tape.scale(dots, 1.0 / tau);
    tape.nll_first_column(logits)
}

#[derive(Clone, Copy, Debug)]
pub struct CclVars {
    pub intra: Var,
    pub inter: Var,
    pub total: Var,
}

/// CCL of one image on the tape, reading anchor features from `v`.
/// `Ok(None)` when no class has anchors.
pub fn ccl_on_tape(
    tape: &mut Tape,
    v: Var,
    sets: &SampleSets,
    banks: &BankPair,
    tau: f64,
) -> Result<Option<CclVars>> {
    let (own, other) = banks.own_and_other(sets.domain);
    let count = sets.anchor_count();
    if count == 0 {
        return Ok(None);
    }
    let n = sets.negatives_per_anchor;
    let mut intra_terms = Vec::new();
    let mut inter_terms = Vec::new();
    for cs in sets.classes.iter().filter(|c| !c.anchor_positions.is_empty()) {
        let rows = tape.gather_pixels(v, &cs.anchor_positions)?;
        let rows = tape.normalize_rows(rows)?;
        let per = if cs.negatives.is_empty() { 0 } else { n };
        intra_terms.push(info_nce_sum(tape, rows, &own.get_positive(cs.class)?, &cs.negatives, per, tau)?);
        inter_terms.push(info_nce_sum(tape, rows, &other.get_positive(cs.class)?, &cs.negatives, per, tau)?);
    }
    let scale = 1.0 / count as f64;
    let intra = sum_vars(tape, &intra_terms)?;
    let intra = tape.scale(intra, scale);
    let inter = sum_vars(tape, &inter_terms)?;
    let inter = tape.scale(inter, scale);
    let total = tape.add(intra, inter)?;
    Ok(Some(CclVars { intra, inter, total }))
}

pub(crate) fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Detached CCL value of one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CclValue {
    pub intra: f64,
    pub inter: f64,
    pub total: f64,
    /// Set when every class was empty and the loss is vacuously zero.
    pub empty: bool,
}

/// `L_intra + L_inter` with positives from `own` and `other`; classes with
/// no anchors are skipped and the sum is normalized by the anchor count.
pub fn ccl(v: &Tensor, sets: &SampleSets, own: &MemoryBank, other: &MemoryBank, tau: f64) -> Result<CclValue> {
    if own.domain() != sets.domain {
        return Err(Error::DomainMismatch {
            expected: own.domain(),
            found: sets.domain,
        });
    }
    let banks = match sets.domain {
        Domain::Source => BankPair {
            source: own.clone(),
            target: other.clone(),
        },
        Domain::Target => BankPair {
            source: other.clone(),
            target: own.clone(),
        },
    };
    let mut tape = Tape::new();
    let vv = tape.constant(v.clone());
    Ok(match ccl_on_tape(&mut tape, vv, sets, &banks, tau)? {
        None => CclValue {
            intra: 0.0,
            inter: 0.0,
            total: 0.0,
            empty: true,
        },
        Some(vars) => CclValue {
            intra: tape.scalar_value(vars.intra),
            inter: tape.scalar_value(vars.inter),
            total: tape.scalar_value(vars.total),
            empty: false,
        },
    })
}
