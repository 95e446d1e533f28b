//! Mean-teacher self-training: pseudo-labels from an EMA teacher, pixel-wise
//! cross-entropy on both domains, the contrastive terms, and AdamW.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contrast::{self, ContrastConfig, SampleSets};
use crate::dfa::{self, DfaOptions, DomainMaps};
use crate::error::{Domain, Error, Result};
use crate::labels::{ClassMap, UNLABELED};
use crate::model::{DfaInput, ForwardVars, SegModel};
use crate::psmm::{BankPair, DEFAULT_POWER, DEFAULT_T0};
use crate::tensor::{ops, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    /// Teacher EMA factor.
    pub beta: f64,
    /// Pseudo-label confidence threshold.
    pub alpha_c: f64,
    /// Weight of the contrastive terms.
    pub lambda_c: f64,
    pub total_iters: u64,
    pub base_lr: f64,
    pub lr_power: f64,
    /// Images per domain per step.
    pub batch_size: usize,
    pub warmup_iters: u64,
    /// Divide each image's CE by its number of labeled pixels.
    pub normalize_ce: bool,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub contrast: ContrastConfig,
    pub dfa: DfaOptions,
    pub use_ccl: bool,
    pub use_dfa: bool,
    pub bank_t0: f64,
    pub bank_power: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            beta: 0.9,
            alpha_c: 0.3,
            lambda_c: 0.1,
            total_iters: 300,
            base_lr: 1e-4,
            lr_power: 0.9,
            batch_size: 4,
            warmup_iters: 50,
            normalize_ce: false,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            contrast: ContrastConfig::default(),
            dfa: DfaOptions::default(),
            use_ccl: true,
            use_dfa: true,
            bank_t0: DEFAULT_T0,
            bank_power: DEFAULT_POWER,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta {} outside (0, 1)", self.beta));
        }
        if !(0.0..=1.0).contains(&self.alpha_c) {
            return bad(format!("alpha_c {} outside [0, 1]", self.alpha_c));
        }
        if !(self.lambda_c >= 0.0) {
            return bad(format!("lambda_c {} is negative", self.lambda_c));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate and weight decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam constants out of range".into());
        }
        if !(self.bank_t0 > 0.0 && self.bank_t0 <= 1.0) {
            return bad(format!("bank_t0 {} outside (0, 1]", self.bank_t0));
        }
        self.contrast.validate()
    }

    /// Contrastive terms enabled at all.
    pub fn ccl_enabled(&self) -> bool {
        self.use_ccl && self.lambda_c > 0.0
    }

    /// Banks are only maintained when something reads them.
    pub fn banks_needed(&self) -> bool {
        self.ccl_enabled() || self.use_dfa
    }
}

/// Poly schedule `base * (1 - m/T)^power`, zero from `m = T` on.
pub fn poly_lr(base: f64, m: u64, total: u64, power: f64) -> f64 {
    if m == 0 {
        return base;
    }
    if m >= total {
        return 0.0;
    }
    base * (1.0 - m as f64 / total as f64).powf(power)
}

/// Pseudo-labels are class maps; filtered pixels are [`UNLABELED`] and
/// become all-zero rows in [`ClassMap::one_hot`].
pub type PseudoLabelMap = ClassMap;

/// Per-pixel argmax of a `[C + 1, H, W]` probability map and its value.
pub fn pseudo_labels_from_probs(probs: &Tensor) -> Result<(PseudoLabelMap, Vec<f64>)> {
    let labels = ClassMap::argmax_of(probs)?;
    let (_, hw) = probs.chw_split();
    let conf = (0..hw)
        .map(|p| probs.values()[(labels.get(p) as usize - 1) * hw + p])
        .collect();
    Ok((labels, conf))
}

/// Teacher prediction on a target image. DFA is applied only when asked and
/// the banks are warm.
pub fn generate_pseudo_labels(
    teacher: &SegModel,
    image: &Tensor,
    banks: Option<&BankPair>,
    dfa_enabled: bool,
    opts: DfaOptions,
) -> Result<(PseudoLabelMap, Vec<f64>)> {
    let out = teacher.forward(image, banks, dfa_enabled, opts)?;
    pseudo_labels_from_probs(&ops::softmax_channel(&out.logits)?)
}

/// Drops pixels with confidence below `alpha_c` (kept at equality).
pub fn filter_pseudo_labels(labels: &PseudoLabelMap, confidences: &[f64], alpha_c: f64) -> PseudoLabelMap {
    let mut out = labels.clone();
    for (p, &c) in confidences.iter().enumerate() {
        if c < alpha_c {
            out.set(p, UNLABELED);
        }
    }
    out
}

/// Summed pixel-wise cross-entropy; unlabeled pixels contribute nothing.
pub fn cross_entropy(logits: &Tensor, labels: &ClassMap) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, labels.one_hot())?;
    Ok(tape.scalar_value(loss))
}

/// `w_t <- beta * w_t + (1 - beta) * w_s` for every weight.
pub fn ema_update(teacher: &mut SegModel, student: &SegModel, beta: f64) -> Result<()> {
    if !teacher.same_architecture(student) {
        return Err(Error::ArchitectureMismatch(
            "teacher and student parameter shapes differ".into(),
        ));
    }
    for (t, s) in teacher.params_mut().into_iter().zip(student.params()) {
        for (tv, sv) in t.values_mut().iter_mut().zip(s.values()) {
            *tv = beta * *tv + (1.0 - beta) * sv;
        }
    }
    Ok(())
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainerConfig, sizes: &[usize]) -> Self {
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            steps: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub(crate) fn restore(&mut self, steps: u64, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) -> Result<()> {
        let same = |a: &[Vec<f64>], b: &[Vec<f64>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
        if !same(&first, &self.first) || !same(&second, &self.second) {
            return Err(Error::ArchitectureMismatch("optimizer moments do not match the model".into()));
        }
        self.steps = steps;
        self.first = first;
        self.second = second;
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            if g.len() != m.len() {
                return Err(Error::ArchitectureMismatch("gradient length differs from parameter".into()));
            }
            for (((w, &g), m), v) in p.values_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Supervision and sampling decided for one image before the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlan {
    /// Ground truth (source) or filtered pseudo-labels (target) at feature
    /// resolution.
    pub labels: ClassMap,
    pub samples: Option<SampleSets>,
    pub maps: Option<DomainMaps>,
}

/// Everything a step fixes before building the loss. Holding a plan fixed
/// makes the loss a smooth function of the student weights.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub source: Vec<ImagePlan>,
    pub target: Vec<ImagePlan>,
    pub ccl_active: bool,
    pub dfa_active: bool,
}

/// Batch-mean loss terms of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub iter: u64,
    pub lr: f64,
    pub l_s: f64,
    pub l_t: f64,
    pub sccl: f64,
    pub tccl: f64,
    pub total: f64,
    pub ccl_active: bool,
    pub dfa_active: bool,
}

impl StepReport {
    pub const HEADER: [&'static str; 7] = ["iter", "lr", "L_S", "L_T", "SCCL", "TCCL", "total"];

    pub fn record(&self) -> [String; 7] {
        [
            self.iter.to_string(),
            format!("{:e}", self.lr),
            format!("{:e}", self.l_s),
            format!("{:e}", self.l_t),
            format!("{:e}", self.sccl),
            format!("{:e}", self.tccl),
            format!("{:e}", self.total),
        ]
    }
}

/// Loss handles on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub l_s: Var,
    pub l_t: Option<Var>,
    pub sccl: Option<Var>,
    pub tccl: Option<Var>,
}

/// A labeled source image at full resolution.
pub type SourceSample<'a> = (&'a Tensor, &'a ClassMap);

#[derive(Clone, Debug)]
pub struct TrainerState {
    pub config: TrainerConfig,
    pub student: SegModel,
    pub teacher: SegModel,
    pub iter: u64,
    pub optimizer: AdamW,
    pub banks: BankPair,
}

impl TrainerState {
    /// Student and teacher both start from `model`.
    pub fn new(model: SegModel, config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let sizes: Vec<usize> = model.params().iter().map(|t| t.numel()).collect();
        let banks = BankPair::new(
            model.config.num_lanes,
            model.config.feature_dim,
            config.bank_t0,
            config.bank_power,
        );
        Ok(Self {
            optimizer: AdamW::new(&config, &sizes),
            teacher: model.clone(),
            student: model,
            iter: 0,
            banks,
            config,
        })
    }

    pub fn lr(&self) -> f64 {
        poly_lr(self.config.base_lr, self.iter, self.config.total_iters, self.config.lr_power)
    }

    fn warm(&self) -> bool {
        self.iter >= self.config.warmup_iters && self.banks.all_initialized()
    }

    pub fn dfa_active(&self) -> bool {
        self.config.use_dfa && self.warm()
    }

    /// Randomness of iteration `m` depends only on the seed and `m`, so a
    /// resumed run draws the same samples.
    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.iter);
        rng
    }

    fn check_batches(&self, source: &[SourceSample<'_>], target: &[&Tensor]) -> Result<()> {
        if source.is_empty() {
            return Err(Error::Data("empty source batch".into()));
        }
        let cfg = &self.student.config;
        for (_, l) in source {
            if l.height() != cfg.image_height || l.width() != cfg.image_width || l.num_lanes() != cfg.num_lanes {
                return Err(Error::Data(format!(
                    "label map {}x{} with {} lanes does not match the model",
                    l.height(),
                    l.width(),
                    l.num_lanes()
                )));
            }
        }
        if target.is_empty() {
            return Err(Error::Data("empty target batch".into()));
        }
        Ok(())
    }

    fn pseudo_labels(&self, target: &[&Tensor], dfa_active: bool) -> Result<Vec<ClassMap>> {
        target
            .iter()
            .map(|img| {
                let (p, conf) =
                    generate_pseudo_labels(&self.teacher, img, Some(&self.banks), dfa_active, self.config.dfa)?;
                Ok(filter_pseudo_labels(&p, &conf, self.config.alpha_c))
            })
            .collect()
    }

    /// Student forward of both batches on `tape` plus the per-image plans.
    fn forward_and_plan(
        &self,
        tape: &mut Tape,
        source: &[SourceSample<'_>],
        target: &[&Tensor],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<ForwardVars>, Vec<ForwardVars>, StepPlan, crate::model::BoundModel)> {
        let dfa_active = self.dfa_active();
        let pseudo = self.pseudo_labels(target, dfa_active)?;
        let bound = self.student.bind(tape, true);
        let input = if dfa_active {
            DfaInput::Banks(&self.banks, self.config.dfa)
        } else {
            DfaInput::Off
        };
        let stride = self.student.config.stride();
        let select = self.config.banks_needed();
        let run = |tape: &mut Tape, img: &Tensor, labels: ClassMap, domain: Domain, rng: &mut ChaCha8Rng| {
            let fwd = self.student.forward_on_tape(tape, &bound, img, input)?;
            let samples = if select {
                let probs = ops::softmax_channel(tape.value(fwd.logits))?;
                Some(contrast::build_sample_sets(
                    domain,
                    tape.value(fwd.v),
                    &labels,
                    &probs,
                    &self.config.contrast,
                    rng,
                ))
            } else {
                None
            };
            let plan = ImagePlan {
                labels,
                samples,
                maps: fwd.maps.clone(),
            };
            Ok::<_, Error>((fwd, plan))
        };
        let mut src_fwd = Vec::new();
        let mut src_plan = Vec::new();
        for (img, labels) in source {
            let (f, p) = run(tape, img, labels.downsample(stride), Domain::Source, rng)?;
            src_fwd.push(f);
            src_plan.push(p);
        }
        let mut tgt_fwd = Vec::new();
        let mut tgt_plan = Vec::new();
        for (img, labels) in target.iter().zip(pseudo) {
            let (f, p) = run(tape, img, labels, Domain::Target, rng)?;
            tgt_fwd.push(f);
            tgt_plan.push(p);
        }
        let plan = StepPlan {
            source: src_plan,
            target: tgt_plan,
            ccl_active: false,
            dfa_active,
        };
        Ok((src_fwd, tgt_fwd, plan, bound))
    }

    /// Folds this step's anchors (pooled over the batch) into the banks.
    fn update_banks(&mut self, tape: &Tape, src: &[ForwardVars], tgt: &[ForwardVars], plan: &StepPlan) -> Result<()> {
        let (m, total) = (self.iter + 1, self.config.total_iters);
        for (domain, fwd, plans) in [(Domain::Source, src, &plan.source), (Domain::Target, tgt, &plan.target)] {
            for class in 1..=self.banks.source.num_classes() {
                let mut anchors = Vec::new();
                for (f, p) in fwd.iter().zip(plans.iter()) {
                    if let Some(s) = &p.samples {
                        anchors.extend(s.anchor_features(tape.value(f.v), class));
                    }
                }
                self.banks.get_mut(domain).absorb(domain, class, &anchors, m, total)?;
            }
        }
        Ok(())
    }

    /// Everything up to (not including) the loss of the current iteration,
    /// without touching the state. The banks are the ones the loss would use
    /// only if they are already warm.
    pub fn plan_step(&self, source: &[SourceSample<'_>], target: &[&Tensor]) -> Result<StepPlan> {
        self.check_batches(source, target)?;
        let mut tape = Tape::new();
        let mut rng = self.step_rng();
        let (_, _, mut plan, _) = self.forward_and_plan(&mut tape, source, target, &mut rng)?;
        plan.ccl_active = self.config.ccl_enabled() && self.warm();
        Ok(plan)
    }

    /// One adaptation iteration.
    pub fn train_step(&mut self, source: &[SourceSample<'_>], target: &[&Tensor]) -> Result<StepReport> {
        self.check_batches(source, target)?;
        let mut tape = Tape::new();
        let mut rng = self.step_rng();
        let (src, tgt, mut plan, bound) = self.forward_and_plan(&mut tape, source, target, &mut rng)?;
        if self.config.banks_needed() {
            self.update_banks(&tape, &src, &tgt, &plan)?;
        }
        plan.ccl_active = self.config.ccl_enabled() && self.warm();
        let vars = batch_loss(&mut tape, &src, &tgt, &plan, &self.banks, &self.config)?;
        self.finish_step(tape, &bound, vars, plan.ccl_active, plan.dfa_active, true)
    }

    /// One source-only supervised iteration (no teacher, no banks).
    pub fn pretrain_step(&mut self, source: &[SourceSample<'_>]) -> Result<StepReport> {
        if source.is_empty() {
            return Err(Error::Data("empty source batch".into()));
        }
        let mut tape = Tape::new();
        let bound = self.student.bind(&mut tape, true);
        let stride = self.student.config.stride();
        let mut fwd = Vec::new();
        let mut plans = Vec::new();
        for (img, labels) in source {
            fwd.push(self.student.forward_on_tape(&mut tape, &bound, img, DfaInput::Off)?);
            plans.push(ImagePlan {
                labels: labels.downsample(stride),
                samples: None,
                maps: None,
            });
        }
        let plan = StepPlan {
            source: plans,
            target: Vec::new(),
            ccl_active: false,
            dfa_active: false,
        };
        let vars = batch_loss(&mut tape, &fwd, &[], &plan, &self.banks, &self.config)?;
        self.finish_step(tape, &bound, vars, false, false, false)
    }

    fn finish_step(
        &mut self,
        mut tape: Tape,
        bound: &crate::model::BoundModel,
        vars: LossVars,
        ccl_active: bool,
        dfa_active: bool,
        ema: bool,
    ) -> Result<StepReport> {
        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar_value(v));
        let lr = self.lr();
        let report = StepReport {
            iter: self.iter,
            lr,
            l_s: tape.scalar_value(vars.l_s),
            l_t: value(vars.l_t),
            sccl: value(vars.sccl),
            tccl: value(vars.tccl),
            total: tape.scalar_value(vars.total),
            ccl_active,
            dfa_active,
        };
        if !report.total.is_finite() {
            return Err(Error::Data(format!("non-finite loss at iteration {}", self.iter)));
        }
        tape.backward(vars.total)?;
        let grads = collect_grads(&tape, bound);
        self.optimizer.step(self.student.params_mut(), &grads, lr)?;
        if ema {
            ema_update(&mut self.teacher, &self.student, self.config.beta)?;
        }
        self.iter += 1;
        Ok(report)
    }
}

fn collect_grads(tape: &Tape, bound: &crate::model::BoundModel) -> Vec<Vec<f64>> {
    bound
        .vars()
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect()
}

/// Mean over each batch of `CE + lambda_c * CCL`, summed over domains.
pub fn batch_loss(
    tape: &mut Tape,
    source: &[ForwardVars],
    target: &[ForwardVars],
    plan: &StepPlan,
    banks: &BankPair,
    cfg: &TrainerConfig,
) -> Result<LossVars> {
    let (l_s, sccl) = domain_loss(tape, source, &plan.source, banks, cfg, plan.ccl_active)?;
    let mut total = if let Some(c) = sccl {
        let w = tape.scale(c, cfg.lambda_c);
        tape.add(l_s, w)?
    } else {
        l_s
    };
    let (mut l_t, mut tccl) = (None, None);
    if !target.is_empty() {
        let (lt, tc) = domain_loss(tape, target, &plan.target, banks, cfg, plan.ccl_active)?;
        total = tape.add(total, lt)?;
        if let Some(c) = tc {
            let w = tape.scale(c, cfg.lambda_c);
            total = tape.add(total, w)?;
        }
        l_t = Some(lt);
        tccl = tc;
    }
    Ok(LossVars {
        total,
        l_s,
        l_t,
        sccl,
        tccl,
    })
}

fn domain_loss(
    tape: &mut Tape,
    fwd: &[ForwardVars],
    plans: &[ImagePlan],
    banks: &BankPair,
    cfg: &TrainerConfig,
    ccl_active: bool,
) -> Result<(Var, Option<Var>)> {
    if fwd.len() != plans.len() || fwd.is_empty() {
        return Err(Error::shape("batch_loss", format!("{} forwards, {} plans", fwd.len(), plans.len())));
    }
    let n = fwd.len() as f64;
    let mut ce_terms = Vec::new();
    let mut ccl_terms = Vec::new();
    for (f, p) in fwd.iter().zip(plans) {
        let ce = tape.cross_entropy(f.logits, p.labels.one_hot())?;
        let ce = if cfg.normalize_ce {
            let valid = p.labels.classes().iter().filter(|&&c| c != UNLABELED).count().max(1);
            tape.scale(ce, 1.0 / valid as f64)
        } else {
            ce
        };
        ce_terms.push(ce);
        if ccl_active {
            if let Some(s) = &p.samples {
                if let Some(c) = contrast::ccl_on_tape(tape, f.v, s, banks, cfg.contrast.tau)? {
                    ccl_terms.push(c.total);
                }
            }
        }
    }
    let ce = contrast::sum_vars(tape, &ce_terms)?;
    let ce = tape.scale(ce, 1.0 / n);
    let ccl = if ccl_active {
        Some(if ccl_terms.is_empty() {
            tape.constant(Tensor::scalar(0.0))
        } else {
            let s = contrast::sum_vars(tape, &ccl_terms)?;
            tape.scale(s, 1.0 / n)
        })
    } else {
        None
    };
    Ok((ce, ccl))
}

/// Loss and weight gradients of `model` with every selection and DFA map
/// taken from `plan`.
pub fn frozen_loss(
    model: &SegModel,
    source: &[SourceSample<'_>],
    target: &[&Tensor],
    plan: &StepPlan,
    banks: &BankPair,
    cfg: &TrainerConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let mut run = |img: &Tensor, p: &ImagePlan| {
        let input = p.maps.as_ref().map_or(DfaInput::Off, DfaInput::Maps);
        model.forward_on_tape(&mut tape, &bound, img, input)
    };
    let src = source
        .iter()
        .zip(&plan.source)
        .map(|((img, _), p)| run(img, p))
        .collect::<Result<Vec<_>>>()?;
    let tgt = target
        .iter()
        .zip(&plan.target)
        .map(|(img, p)| run(img, p))
        .collect::<Result<Vec<_>>>()?;
    let vars = batch_loss(&mut tape, &src, &tgt, plan, banks, cfg)?;
    let value = tape.scalar_value(vars.total);
    tape.backward(vars.total)?;
    Ok((value, collect_grads(&tape, &bound)))
}

/// Per-image loss pieces recomputed without the tape, for cross-checks.
pub fn image_terms(
    model: &SegModel,
    image: &Tensor,
    plan: &ImagePlan,
    banks: &BankPair,
    cfg: &TrainerConfig,
) -> Result<(f64, f64)> {
    let e = model.forward(image, None, false, cfg.dfa)?.e;
    let f_aug = match &plan.maps {
        Some(m) => dfa::dfa_fuse(&e, m, &model.dfa)?,
        None => e,
    };
    let logits = model.pred_head.apply(&f_aug)?;
    let v = model.rep_head.apply(&f_aug)?;
    let mut ce = cross_entropy(&logits, &plan.labels)?;
    if cfg.normalize_ce {
        ce /= plan.labels.classes().iter().filter(|&&c| c != UNLABELED).count().max(1) as f64;
    }
    let ccl = match &plan.samples {
        Some(s) if !s.is_empty() => {
            let (own, other) = banks.own_and_other(s.domain);
            contrast::ccl(&v, s, own, other, cfg.contrast.tau)?.total
        }
        _ => 0.0,
    };
    Ok((ce, ccl))
}
