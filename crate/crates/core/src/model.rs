//! Segmentation network: a small strided conv encoder producing `E`, a
//! prediction head, a representation head `U`, and DFA fusion between them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dfa::{self, DfaOptions, DfaVars, DfaWeights, DomainMaps};
use crate::error::{Error, Result};
use crate::psmm::BankPair;
use crate::tensor::{ops, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_lanes: usize,
    pub feature_dim: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Hidden encoder widths; the last encoder layer maps to `feature_dim`.
    pub encoder_channels: Vec<usize>,
    pub seed: u64,
    /// Use the prediction head for DFA's category map instead of a separate
    /// classifier.
    pub share_dfa_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_lanes: 2,
            feature_dim: 16,
            image_height: 64,
            image_width: 64,
            encoder_channels: vec![8, 16],
            seed: 0,
            share_dfa_head: true,
        }
    }
}

pub const IMAGE_CHANNELS: usize = 3;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_lanes == 0 || self.num_lanes > 250 {
            return Err(Error::Config(format!("num_lanes {} outside 1..=250", self.num_lanes)));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config("feature_dim must be >= 2".into()));
        }
        if self.image_height < 8 || self.image_width < 8 || self.image_height % 2 == 1 || self.image_width % 2 == 1 {
            return Err(Error::Config(format!(
                "image size {}x{} must be even and >= 8",
                self.image_height, self.image_width
            )));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Config("encoder_channels must be a non-empty list of widths".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_lanes + 1
    }

    /// Encoder downsampling factor.
    pub fn stride(&self) -> usize {
        2
    }

    pub fn feature_height(&self) -> usize {
        self.image_height / self.stride()
    }

    pub fn feature_width(&self) -> usize {
        self.image_width / self.stride()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        let y = ops::conv2d(input, &self.weight, self.stride, self.padding)?;
        ops::add_channel_bias(&y, &self.bias)
    }

    fn random(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize, stride: usize, gain: f64) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let bound = gain / fan_in.sqrt();
        Self {
            weight: Tensor::from_fn(&[c_out, c_in, k, k], |_| rng.random_range(-bound..bound)),
            bias: Tensor::zeros(&[c_out]),
            stride,
            padding: k / 2,
        }
    }

    /// `[D, 3D]` 1x1 conv that copies the first `D` input channels.
    pub fn identity_fuse(d: usize) -> Self {
        Self {
            weight: Tensor::from_fn(&[d, 3 * d, 1, 1], |i| {
                let (o, c) = (i / (3 * d), i % (3 * d));
                if o == c { 1.0 } else { 0.0 }
            }),
            bias: Tensor::zeros(&[d]),
            stride: 1,
            padding: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[C_out, C_in]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn random(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize) -> Self {
        let bound = 1.0 / (c_in as f64).sqrt();
        Self {
            weight: Tensor::from_fn(&[c_out, c_in], |_| rng.random_range(-bound..bound)),
            bias: Tensor::zeros(&[c_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub config: ModelConfig,
    pub encoder: Vec<Conv>,
    pub pred_head: Conv,
    pub rep_head: Conv,
    pub dfa: DfaWeights,
}

/// How the forward pass obtains the domain-level maps.
#[derive(Clone, Copy, Debug)]
pub enum DfaInput<'a> {
    Off,
    Banks(&'a BankPair, DfaOptions),
    /// Previously built maps, held fixed.
    Maps(&'a DomainMaps),
}

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub e: Var,
    pub f_aug: Var,
    pub logits: Var,
    pub v: Var,
    pub maps: Option<DomainMaps>,
}

/// Detached forward results.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub e: Tensor,
    pub f_aug: Tensor,
    pub logits: Tensor,
    pub v: Tensor,
}

/// Parameter handles in declaration order (see [`SegModel::params`]).
#[derive(Clone, Debug)]
pub struct BoundModel {
    vars: Vec<Var>,
    encoder_layers: usize,
}

impl BoundModel {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn pair(&self, i: usize) -> (Var, Var) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }

    fn encoder(&self, layer: usize) -> (Var, Var) {
        self.pair(layer)
    }

    fn pred(&self) -> (Var, Var) {
        self.pair(self.encoder_layers)
    }

    fn rep(&self) -> (Var, Var) {
        self.pair(self.encoder_layers + 1)
    }

    fn dfa(&self) -> DfaVars {
        let (source_w, source_b) = self.pair(self.encoder_layers + 2);
        let (target_w, target_b) = self.pair(self.encoder_layers + 3);
        let (fuse_w, fuse_b) = self.pair(self.encoder_layers + 4);
        DfaVars {
            source_w,
            source_b,
            target_w,
            target_b,
            fuse_w,
            fuse_b,
        }
    }
}

impl SegModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.feature_dim;
        let mut widths = vec![IMAGE_CHANNELS];
        widths.extend(&config.encoder_channels);
        widths.push(d);
        let relu_gain = 6f64.sqrt();
        let encoder = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let stride = if i == 1.min(widths.len() - 2) { 2 } else { 1 };
                Conv::random(&mut rng, w[1], w[0], 3, stride, relu_gain)
            })
            .collect();
        let pred_head = Conv::random(&mut rng, config.num_classes(), d, 1, 1, 1.0);
        let rep_head = Conv::random(&mut rng, d, d, 1, 1, 1.0);
        let source_linear = Linear::random(&mut rng, d, d);
        let target_linear = Linear::random(&mut rng, d, d);
        let classifier = (!config.share_dfa_head).then(|| Conv::random(&mut rng, config.num_classes(), d, 1, 1, 1.0));
        Ok(Self {
            encoder,
            pred_head,
            rep_head,
            dfa: DfaWeights {
                source_linear,
                target_linear,
                fuse: Conv::identity_fuse(d),
                classifier,
            },
            config,
        })
    }

    /// Every weight tensor in declaration order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for c in &self.encoder {
            out.extend([&c.weight, &c.bias]);
        }
        out.extend([&self.pred_head.weight, &self.pred_head.bias]);
        out.extend([&self.rep_head.weight, &self.rep_head.bias]);
        out.extend([&self.dfa.source_linear.weight, &self.dfa.source_linear.bias]);
        out.extend([&self.dfa.target_linear.weight, &self.dfa.target_linear.bias]);
        out.extend([&self.dfa.fuse.weight, &self.dfa.fuse.bias]);
        if let Some(c) = &self.dfa.classifier {
            out.extend([&c.weight, &c.bias]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.encoder {
            out.extend([&mut c.weight, &mut c.bias]);
        }
        out.extend([&mut self.pred_head.weight, &mut self.pred_head.bias]);
        out.extend([&mut self.rep_head.weight, &mut self.rep_head.bias]);
        out.extend([&mut self.dfa.source_linear.weight, &mut self.dfa.source_linear.bias]);
        out.extend([&mut self.dfa.target_linear.weight, &mut self.dfa.target_linear.bias]);
        out.extend([&mut self.dfa.fuse.weight, &mut self.dfa.fuse.bias]);
        if let Some(c) = &mut self.dfa.classifier {
            out.extend([&mut c.weight, &mut c.bias]);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Head that produces DFA's category map.
    pub fn category_head(&self) -> &Conv {
        self.dfa.classifier.as_ref().unwrap_or(&self.pred_head)
    }

    pub fn same_architecture(&self, other: &SegModel) -> bool {
        let (a, b) = (self.params(), other.params());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
    }

    /// Records every parameter on `tape`, trainable or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let vars = self
            .params()
            .into_iter()
            .map(|t| if trainable { tape.param(t) } else { tape.constant(t.clone()) })
            .collect();
        BoundModel {
            vars,
            encoder_layers: self.encoder.len(),
        }
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let want = [IMAGE_CHANNELS, self.config.image_height, self.config.image_width];
        if image.shape() != want {
            return Err(Error::shape(
                "forward",
                format!("image {:?}, model expects {want:?}", image.shape()),
            ));
        }
        Ok(())
    }

    pub fn encode(&self, tape: &mut Tape, bound: &BoundModel, image: Var) -> Result<Var> {
        let mut x = image;
        let last = self.encoder.len() - 1;
        for (i, layer) in self.encoder.iter().enumerate() {
            let (w, b) = bound.encoder(i);
            x = tape.conv2d(x, w, layer.stride, layer.padding)?;
            x = tape.add_channel_bias(x, b)?;
            if i < last {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        image: &Tensor,
        dfa_input: DfaInput<'_>,
    ) -> Result<ForwardVars> {
        self.check_image(image)?;
        let img = tape.constant(image.clone());
        let e = self.encode(tape, bound, img)?;
        let maps = match dfa_input {
            DfaInput::Off => None,
            DfaInput::Banks(banks, opts) => Some(dfa::domain_maps(tape.value(e), self.category_head(), banks, opts)?),
            DfaInput::Maps(maps) => Some(maps.clone()),
        };
        let f_aug = match &maps {
            Some(m) => dfa::fuse_on_tape(tape, e, m, &bound.dfa())?,
            None => e,
        };
        let (pw, pb) = bound.pred();
        let logits = tape.conv1x1(f_aug, pw, pb)?;
        let (rw, rb) = bound.rep();
        let v = tape.conv1x1(f_aug, rw, rb)?;
        Ok(ForwardVars {
            e,
            f_aug,
            logits,
            v,
            maps,
        })
    }

    /// Inference forward. With `dfa_enabled`, both banks must be warm.
    pub fn forward(
        &self,
        image: &Tensor,
        banks: Option<&BankPair>,
        dfa_enabled: bool,
        opts: DfaOptions,
    ) -> Result<ForwardOutput> {
        let dfa_input = match (dfa_enabled, banks) {
            (false, _) => DfaInput::Off,
            (true, Some(b)) => DfaInput::Banks(b, opts),
            (true, None) => {
                return Err(Error::BankNotWarmedUp {
                    domain: crate::Domain::Source,
                    class: 1,
                })
            }
        };
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward_on_tape(&mut tape, &bound, image, dfa_input)?;
        Ok(ForwardOutput {
            e: tape.value(out.e).clone(),
            f_aug: tape.value(out.f_aug).clone(),
            logits: tape.value(out.logits).clone(),
            v: tape.value(out.v).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Domain;

    fn cfg(c: usize, d: usize, hw: usize) -> ModelConfig {
        ModelConfig {
            num_lanes: c,
            feature_dim: d,
            image_height: hw,
            image_width: hw,
            ..Default::default()
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = SegModel::new(ModelConfig::default()).unwrap();
        let b = SegModel::new(ModelConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = SegModel::new(ModelConfig { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn prediction_head_has_c_plus_one_outputs() {
        let m = SegModel::new(cfg(2, 16, 16)).unwrap();
        assert_eq!(m.pred_head.weight.shape(), &[3, 16, 1, 1]);
    }

    #[test]
    fn shape_contract_over_grid() {
        for c in [1, 2, 4] {
            for d in [4, 16] {
                for hw in [16, 32] {
                    let m = SegModel::new(cfg(c, d, hw)).unwrap();
                    let img = Tensor::from_fn(&[3, hw, hw], |i| ((i * 31) % 17) as f64 / 17.0);
                    let out = m.forward(&img, None, false, DfaOptions::default()).unwrap();
                    assert_eq!(out.e.shape(), &[d, hw / 2, hw / 2]);
                    assert_eq!(out.logits.shape(), &[c + 1, hw / 2, hw / 2]);
                    assert_eq!(out.v.shape(), &[d, hw / 2, hw / 2]);
                    assert!(out.logits.is_finite());
                    let sm = ops::softmax_channel(&out.logits).unwrap();
                    let (ch, n) = sm.chw_split();
                    for p in 0..n {
                        let s: f64 = (0..ch).map(|k| sm.values()[k * n + p]).sum();
                        assert!((s - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn dfa_bypass_keeps_e() {
        let m = SegModel::new(cfg(2, 4, 16)).unwrap();
        let img = Tensor::from_fn(&[3, 16, 16], |i| (i as f64 * 0.01).sin());
        let out = m.forward(&img, None, false, DfaOptions::default()).unwrap();
        assert_eq!(out.f_aug, out.e);
        assert_eq!(out, m.forward(&img, None, false, DfaOptions::default()).unwrap());
    }

    #[test]
    fn zero_image_gives_uniform_softmax() {
        let m = SegModel::new(cfg(2, 8, 16)).unwrap();
        let out = m.forward(&Tensor::zeros(&[3, 16, 16]), None, false, DfaOptions::default()).unwrap();
        assert!(out.logits.values().iter().all(|&v| v == 0.0));
        let sm = ops::softmax_channel(&out.logits).unwrap();
        assert!(sm.values().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn dfa_requires_warm_banks() {
        let m = SegModel::new(cfg(2, 4, 16)).unwrap();
        let banks = BankPair::new(2, 4, 0.9, 0.9);
        let img = Tensor::zeros(&[3, 16, 16]);
        let err = m.forward(&img, Some(&banks), true, DfaOptions::default()).unwrap_err();
        assert!(matches!(err, Error::BankNotWarmedUp { .. }));

        let mut banks = banks;
        for c in 1..=2 {
            banks.source.initialize_class(Domain::Source, c, &[vec![1.0; 4]]).unwrap();
            banks.target.initialize_class(Domain::Target, c, &[vec![-1.0; 4]]).unwrap();
        }
        // fresh fusion weights pass E through
        let out = m.forward(&img, Some(&banks), true, DfaOptions::default()).unwrap();
        assert_eq!(out.f_aug, out.e);
    }

    #[test]
    fn rejects_wrong_image_shape() {
        let m = SegModel::new(cfg(1, 4, 16)).unwrap();
        assert!(m.forward(&Tensor::zeros(&[3, 8, 16]), None, false, DfaOptions::default()).is_err());
    }
}
