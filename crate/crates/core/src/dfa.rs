//! Domain-level feature aggregation.
//!
//! Every pixel predicted as a lane is painted with the bank row of its
//! predicted class, giving one domain-level map per bank. Background pixels
//! predicted with low confidence (UBP) borrow the nearest lane row instead of
//! staying empty. Both maps pass through a channel-wise linear layer and are
//! fused with the pixel features by a 1x1 convolution.

use crate::error::Result;
use crate::labels::ClassMap;
use crate::model::{Conv, Linear};
use crate::psmm::{BankPair, MemoryBank};
use crate::tensor::{ops, Tape, Tensor, Var};

pub const DEFAULT_EPSILON: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DfaOptions {
    /// Confidence below which a background prediction is unreliable.
    pub epsilon: f64,
    /// Refine unreliable background pixels.
    pub ubp: bool,
}

impl Default for DfaOptions {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            ubp: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DfaWeights {
    pub source_linear: Linear,
    pub target_linear: Linear,
    /// `[D, 3D, 1, 1]` fusion of `(E, F_S, F_T)`.
    pub fuse: Conv,
    /// Separate category classifier for `P`; `None` shares the prediction head.
    pub classifier: Option<Conv>,
}

/// Predicted category and its confidence per pixel.
pub fn categories_from_logits(logits: &Tensor) -> Result<(ClassMap, Vec<f64>)> {
    let probs = ops::softmax_channel(logits)?;
    let p = ClassMap::argmax_of(&probs)?;
    let (c, hw) = probs.chw_split();
    let conf = (0..hw)
        .map(|i| (0..c).map(|ch| probs.values()[ch * hw + i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok((p, conf))
}

/// `P = argmax softmax(head(E))` and the matching max probability.
pub fn predict_categories(e: &Tensor, head: &Conv) -> Result<(ClassMap, Vec<f64>)> {
    categories_from_logits(&head.apply(e)?)
}

/// Background pixels whose confidence is below `epsilon`.
#[derive(Clone, Debug, PartialEq)]
pub struct UbpSet {
    pub positions: Vec<usize>,
    pub epsilon: f64,
}

pub fn find_ubp(p: &ClassMap, conf: &[f64], epsilon: f64) -> UbpSet {
    let bg = p.background();
    UbpSet {
        positions: (0..p.len()).filter(|&i| p.get(i) == bg && conf[i] < epsilon).collect(),
        epsilon,
    }
}

/// Lane class whose bank row is nearest (Euclidean) to `feature`; ties go
/// to the lowest class.
pub fn ubp_category(feature: &[f64], bank: &MemoryBank) -> Result<usize> {
    bank.ensure_warm()?;
    let dists = (1..=bank.num_classes()).map(|c| {
        bank.row(c)
            .iter()
            .zip(feature)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
    });
    Ok(ops::argmin(dists) + 1)
}

/// Domain-level map `Z` (`[D, H, W]`): bank rows at foreground and UBP
/// pixels, zeros at reliable background.
pub fn build_domain_map(
    p: &ClassMap,
    conf: &[f64],
    bank: &MemoryBank,
    e: &Tensor,
    opts: DfaOptions,
) -> Result<Tensor> {
    bank.ensure_warm()?;
    let (d, hw) = e.chw_split();
    let mut z = Tensor::zeros(e.shape());
    let bg = p.background();
    let paint = |z: &mut Tensor, pos: usize, class: usize| {
        let row = bank.row(class);
        let zv = z.values_mut();
        for ch in 0..d {
            zv[ch * hw + pos] = row[ch];
        }
    };
    for pos in 0..hw {
        let c = p.get(pos);
        if c != bg {
            paint(&mut z, pos, c as usize);
        }
    }
    if opts.ubp {
        for pos in find_ubp(p, conf, opts.epsilon).positions {
            let class = ubp_category(&e.pixel(pos), bank)?;
            paint(&mut z, pos, class);
        }
    }
    Ok(z)
}

/// The pair of domain-level maps consumed by the fusion layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainMaps {
    pub source: Tensor,
    pub target: Tensor,
}

/// Builds both maps from a single category prediction.
pub fn domain_maps(e: &Tensor, head: &Conv, banks: &BankPair, opts: DfaOptions) -> Result<DomainMaps> {
    let (p, conf) = predict_categories(e, head)?;
    Ok(DomainMaps {
        source: build_domain_map(&p, &conf, &banks.source, e, opts)?,
        target: build_domain_map(&p, &conf, &banks.target, e, opts)?,
    })
}

/// Tape handles of the DFA parameters.
#[derive(Clone, Copy, Debug)]
pub struct DfaVars {
    pub source_w: Var,
    pub source_b: Var,
    pub target_w: Var,
    pub target_b: Var,
    pub fuse_w: Var,
    pub fuse_b: Var,
}

/// `F_aug = Conv(concat(E, linear_s(Z_s), linear_t(Z_t)))`. The maps enter
/// as constants.
pub fn fuse_on_tape(tape: &mut Tape, e: Var, maps: &DomainMaps, vars: &DfaVars) -> Result<Var> {
    let zs = tape.constant(maps.source.clone());
    let zt = tape.constant(maps.target.clone());
    let fs = tape.linear_channels(zs, vars.source_w, vars.source_b)?;
    let ft = tape.linear_channels(zt, vars.target_w, vars.target_b)?;
    let cat = tape.concat_channels(&[e, fs, ft])?;
    tape.conv1x1(cat, vars.fuse_w, vars.fuse_b)
}

/// Detached [`fuse_on_tape`].
pub fn dfa_fuse(e: &Tensor, maps: &DomainMaps, weights: &DfaWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ev = tape.constant(e.clone());
    let vars = DfaVars {
        source_w: tape.constant(weights.source_linear.weight.clone()),
        source_b: tape.constant(weights.source_linear.bias.clone()),
        target_w: tape.constant(weights.target_linear.weight.clone()),
        target_b: tape.constant(weights.target_linear.bias.clone()),
        fuse_w: tape.constant(weights.fuse.weight.clone()),
        fuse_b: tape.constant(weights.fuse.bias.clone()),
    };
    let out = fuse_on_tape(&mut tape, ev, maps, &vars)?;
    Ok(tape.value(out).clone())
}
