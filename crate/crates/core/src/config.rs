//! Run configuration: plain `key = value` lines with `#` comments. Every
//! tunable lives here with its default; [`RunConfig::dump`] writes the
//! canonical form, which parses back to the same bytes.

use std::fmt::Write as _;

use crate::contrast::ContrastConfig;
use crate::data::{DomainStyle, SceneConfig};
use crate::dfa::DfaOptions;
use crate::error::{Domain, Error, Result};
use crate::metrics::{MetricsConfig, BASE_THRESHOLD_800};
use crate::model::ModelConfig;
use crate::selftrain::TrainerConfig;

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|_| format!("`{s}` is not a valid {}", stringify!($t)))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(u64, usize, bool);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
        if v.is_finite() { Ok(v) } else { Err(format!("`{s}` is not finite")) }
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(|p| usize::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
    }
}

impl ConfigValue for [f64; 3] {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v = s.split(',').map(|p| f64::parse_value(p.trim())).collect::<std::result::Result<Vec<_>, _>>()?;
        v.try_into().map_err(|_| format!("`{s}` needs exactly three numbers"))
    }
    fn render(&self) -> String {
        self.iter().map(f64::render).collect::<Vec<_>>().join(", ")
    }
}

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr ),* $(,)?) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $name: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($name) => {
                        self.$name = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// Canonical text form, one `key = value` per line.
            pub fn dump(&self) -> String {
                let mut out = String::new();
                $( let _ = writeln!(out, "{} = {}", stringify!($name), ConfigValue::render(&self.$name)); )*
                out
            }
        }
    };
}

run_config! {
    num_lanes: usize = 2,
    feature_dim: usize = 16,
    image_height: usize = 64,
    image_width: usize = 64,
    encoder_channels: Vec<usize> = vec![8, 16],
    model_seed: u64 = 0,
    /// DFA's category map reuses the prediction head.
    share_dfa_head: bool = true,

    stroke_width: usize = 4,
    source_count: usize = 256,
    target_count: usize = 256,
    eval_count: usize = 64,
    data_seed: u64 = 0,
    flip: bool = true,

    source_background: f64 = 0.25,
    source_texture: f64 = 0.02,
    source_lane_brightness: f64 = 1.0,
    source_color_cast: [f64; 3] = [1.0, 1.0, 1.0],
    source_noise_sigma: f64 = 0.0,
    source_brightness_shift: f64 = 0.0,
    source_jitter: f64 = 0.0,
    source_blur: bool = false,
    target_background: f64 = 0.35,
    target_texture: f64 = 0.1,
    target_lane_brightness: f64 = 0.7,
    target_color_cast: [f64; 3] = [1.0, 1.0, 1.0],
    target_noise_sigma: f64 = 0.12,
    target_brightness_shift: f64 = 0.0,
    target_jitter: f64 = 2.0,
    target_blur: bool = true,

    pretrain_iters: u64 = 400,
    /// Desk-scale rate; at 1e-4 the small model barely moves in 400 steps.
    pretrain_lr: f64 = 0.01,
    adapt_iters: u64 = 300,
    /// Adaptation rate; `TrainerConfig::default` keeps 1e-4.
    base_lr: f64 = 1e-3,
    lr_power: f64 = 0.9,
    batch_size: usize = 4,
    beta: f64 = 0.9,
    alpha_c: f64 = 0.3,
    lambda_c: f64 = 0.1,
    warmup_iters: u64 = 50,
    /// Divide each image's CE by its labeled-pixel count.
    normalize_ce: bool = false,
    weight_decay: f64 = 0.01,
    adam_beta1: f64 = 0.9,
    adam_beta2: f64 = 0.999,
    adam_eps: f64 = 1e-8,
    anchors_per_class: usize = 32,
    negatives_per_anchor: usize = 8,
    tau: f64 = 0.07,
    mu_c: f64 = 0.2,
    epsilon: f64 = 0.7,
    ubp: bool = true,
    use_ccl: bool = true,
    use_dfa: bool = true,
    bank_t0: f64 = 0.9,
    bank_power: f64 = 0.9,
    train_seed: u64 = 0,
    /// Write an intermediate checkpoint every this many iterations (0: never).
    checkpoint_every: u64 = 0,

    /// Point tolerance at 800 px width.
    metric_base: f64 = BASE_THRESHOLD_800,
    /// Scale `metric_base` by `image_width / 800`.
    metric_scale_base: bool = true,
    iou_threshold: f64 = 0.5,
    /// Images drawn in the SVG overlay.
    svg_images: usize = 4,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{p}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.scene_config().validate()?;
        self.trainer_config(Stage::Adapt).validate()?;
        self.trainer_config(Stage::Pretrain).validate()?;
        for d in [Domain::Source, Domain::Target] {
            self.style(d).validate()?;
        }
        if self.stroke_width % 2 == 1 {
            return Err(Error::Config("stroke_width must be even (one feature pixel is two image pixels)".into()));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) || self.metric_base <= 0.0 {
            return Err(Error::Config("metric thresholds out of range".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_lanes: self.num_lanes,
            feature_dim: self.feature_dim,
            image_height: self.image_height,
            image_width: self.image_width,
            encoder_channels: self.encoder_channels.clone(),
            seed: self.model_seed,
            share_dfa_head: self.share_dfa_head,
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            num_lanes: self.num_lanes,
            height: self.image_height,
            width: self.image_width,
            stroke_width: self.stroke_width,
        }
    }

    pub fn style(&self, domain: Domain) -> DomainStyle {
        match domain {
            Domain::Source => DomainStyle {
                background: self.source_background,
                texture: self.source_texture,
                lane_brightness: self.source_lane_brightness,
                color_cast: self.source_color_cast,
                noise_sigma: self.source_noise_sigma,
                brightness_shift: self.source_brightness_shift,
                jitter: self.source_jitter,
                blur: self.source_blur,
            },
            Domain::Target => DomainStyle {
                background: self.target_background,
                texture: self.target_texture,
                lane_brightness: self.target_lane_brightness,
                color_cast: self.target_color_cast,
                noise_sigma: self.target_noise_sigma,
                brightness_shift: self.target_brightness_shift,
                jitter: self.target_jitter,
                blur: self.target_blur,
            },
        }
    }

    pub fn dfa_options(&self) -> DfaOptions {
        DfaOptions {
            epsilon: self.epsilon,
            ubp: self.ubp,
        }
    }

    pub fn trainer_config(&self, stage: Stage) -> TrainerConfig {
        let (total_iters, base_lr) = match stage {
            Stage::Pretrain => (self.pretrain_iters, self.pretrain_lr),
            Stage::Adapt => (self.adapt_iters, self.base_lr),
        };
        TrainerConfig {
            beta: self.beta,
            alpha_c: self.alpha_c,
            lambda_c: self.lambda_c,
            total_iters,
            base_lr,
            lr_power: self.lr_power,
            batch_size: self.batch_size,
            warmup_iters: self.warmup_iters,
            normalize_ce: self.normalize_ce,
            weight_decay: self.weight_decay,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            contrast: ContrastConfig {
                anchors_per_class: self.anchors_per_class,
                negatives_per_anchor: self.negatives_per_anchor,
                tau: self.tau,
                mu_c: self.mu_c,
            },
            dfa: self.dfa_options(),
            use_ccl: self.use_ccl,
            use_dfa: self.use_dfa,
            bank_t0: self.bank_t0,
            bank_power: self.bank_power,
            seed: self.train_seed,
        }
    }

    pub fn metrics_config(&self) -> MetricsConfig {
        let base = if self.metric_scale_base {
            self.metric_base * self.image_width as f64 / 800.0
        } else {
            self.metric_base
        };
        MetricsConfig {
            base,
            iou_threshold: self.iou_threshold,
            stroke_width: self.stroke_width,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Adapt,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips_byte_for_byte() {
        let d = RunConfig::default().dump();
        assert_eq!(RunConfig::parse(&d).unwrap().dump(), d);
        let mut c = RunConfig::default();
        c.set("tau", "0.05").unwrap();
        c.set("target_color_cast", "0.5,1,1.5").unwrap();
        c.set("encoder_channels", "4, 6").unwrap();
        let d = c.dump();
        let back = RunConfig::parse(&d).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.dump(), d);
    }

    #[test]
    fn defaults_match_the_documented_values() {
        let t = RunConfig::default().trainer_config(Stage::Adapt);
        assert_eq!((t.beta, t.alpha_c, t.lambda_c, t.base_lr, t.lr_power), (0.9, 0.3, 0.1, 1e-3, 0.9));
        assert_eq!((t.contrast.tau, t.dfa.epsilon, t.bank_t0, t.bank_power), (0.07, 0.7, 0.9, 0.9));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("no_such_key = 1").is_err());
        assert!(RunConfig::parse("tau 0.1").is_err());
        assert!(RunConfig::parse("beta = 1.5").is_err());
        assert!(RunConfig::parse("tau = 0.1\ntau = 0.2").is_err());
        assert!(RunConfig::parse("flip = yes").is_err());
        let c = RunConfig::parse("# comment\n\nbatch_size = 2  # trailing\n").unwrap();
        assert_eq!(c.batch_size, 2);
    }
}
