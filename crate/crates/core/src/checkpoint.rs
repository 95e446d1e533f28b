//! Flat little-endian checkpoint: `DACCA1`, the model config as `i64`s, every
//! weight tensor as `(u32 rank, u64 dims.., f64 values..)` in declaration
//! order, then optional bank and trainer sections.

use std::fs;
use std::path::Path;

use crate::dfa::DfaOptions;
use crate::error::{Domain, Error, Result};
use crate::model::{ModelConfig, SegModel};
use crate::psmm::{BankPair, MemoryBank};
use crate::selftrain::{TrainerConfig, TrainerState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"DACCA1";

/// Optimizer progress needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerSnapshot {
    pub iter: u64,
    pub teacher: SegModel,
    pub adam_steps: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SegModel,
    /// Run inference with DFA (requires `banks`).
    pub dfa_inference: bool,
    pub dfa: DfaOptions,
    pub banks: Option<BankPair>,
    pub trainer: Option<TrainerSnapshot>,
}

impl Checkpoint {
    pub fn from_model(model: SegModel) -> Self {
        Self {
            model,
            dfa_inference: false,
            dfa: DfaOptions::default(),
            banks: None,
            trainer: None,
        }
    }

    /// Student weights, banks and optimizer state of `state`.
    pub fn from_state(state: &TrainerState, with_banks: bool) -> Self {
        Self {
            model: state.student.clone(),
            dfa_inference: with_banks && state.config.use_dfa && state.banks.all_initialized(),
            dfa: state.config.dfa,
            banks: with_banks.then(|| state.banks.clone()),
            trainer: Some(TrainerSnapshot {
                iter: state.iter,
                teacher: state.teacher.clone(),
                adam_steps: state.optimizer.steps(),
                first: state.optimizer.first_moments().to_vec(),
                second: state.optimizer.second_moments().to_vec(),
            }),
        }
    }

    /// Resumes a trainer from this checkpoint under `config`.
    pub fn into_state(self, config: TrainerConfig) -> Result<TrainerState> {
        let mut state = TrainerState::new(self.model, config)?;
        if let Some(b) = self.banks {
            state.banks = b;
        }
        if let Some(t) = self.trainer {
            if !t.teacher.same_architecture(&state.student) {
                return Err(Error::ArchitectureMismatch("checkpoint teacher differs from student".into()));
            }
            state.iter = t.iter;
            state.teacher = t.teacher;
            state.optimizer.restore(t.adam_steps, t.first, t.second)?;
        }
        Ok(state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        write_config(&mut w, &self.model.config);
        w.i64(self.dfa_inference as i64);
        w.i64(self.dfa.ubp as i64);
        w.f64(self.dfa.epsilon);
        write_params(&mut w, &self.model);
        match &self.banks {
            Some(b) => {
                w.u8(1);
                write_bank(&mut w, &b.source);
                write_bank(&mut w, &b.target);
            }
            None => w.u8(0),
        }
        match &self.trainer {
            Some(t) => {
                w.u8(1);
                w.u64(t.iter);
                write_params(&mut w, &t.teacher);
                w.u64(t.adam_steps);
                for set in [&t.first, &t.second] {
                    w.u64(set.len() as u64);
                    for v in set.iter() {
                        w.u64(v.len() as u64);
                        v.iter().for_each(|&x| w.f64(x));
                    }
                }
            }
            None => w.u8(0),
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Data("not a checkpoint (bad magic)".into()));
        }
        let config = read_config(&mut r)?;
        let dfa_inference = r.i64()? != 0;
        let ubp = r.i64()? != 0;
        let epsilon = r.f64()?;
        let model = read_params(&mut r, config.clone())?;
        let banks = if r.u8()? == 1 {
            Some(BankPair {
                source: read_bank(&mut r, Domain::Source)?,
                target: read_bank(&mut r, Domain::Target)?,
            })
        } else {
            None
        };
        let trainer = if r.u8()? == 1 {
            let iter = r.u64()?;
            let teacher = read_params(&mut r, config)?;
            let adam_steps = r.u64()?;
            let mut sets = Vec::new();
            for _ in 0..2 {
                let n = r.len()?;
                let mut set = Vec::with_capacity(n);
                for _ in 0..n {
                    let k = r.len()?;
                    set.push((0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
                }
                sets.push(set);
            }
            let second = sets.pop().expect("two sets");
            let first = sets.pop().expect("two sets");
            Some(TrainerSnapshot {
                iter,
                teacher,
                adam_steps,
                first,
                second,
            })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Data(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self {
            model,
            dfa_inference,
            dfa: DfaOptions { epsilon, ubp },
            banks,
            trainer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Data(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    /// A count that must fit in what is left of the file.
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.bytes.len() - self.pos) as u64 {
            return Err(Error::Data(format!("implausible length {n} in checkpoint")));
        }
        Ok(n as usize)
    }
}

fn write_config(w: &mut Writer, c: &ModelConfig) {
    for v in [c.num_lanes, c.feature_dim, c.image_height, c.image_width, c.encoder_channels.len()] {
        w.i64(v as i64);
    }
    for &ch in &c.encoder_channels {
        w.i64(ch as i64);
    }
    w.i64(c.seed as i64);
    w.i64(c.share_dfa_head as i64);
}

fn read_config(r: &mut Reader<'_>) -> Result<ModelConfig> {
    let mut int = || -> Result<usize> {
        let v = r.i64()?;
        usize::try_from(v).map_err(|_| Error::Data(format!("negative config value {v} in checkpoint")))
    };
    let (num_lanes, feature_dim, image_height, image_width, n) = (int()?, int()?, int()?, int()?, int()?);
    if n > 64 {
        return Err(Error::Data(format!("{n} encoder layers in checkpoint")));
    }
    let encoder_channels = (0..n).map(|_| int()).collect::<Result<Vec<_>>>()?;
    let seed = r.i64()? as u64;
    let share_dfa_head = r.i64()? != 0;
    let config = ModelConfig {
        num_lanes,
        feature_dim,
        image_height,
        image_width,
        encoder_channels,
        seed,
        share_dfa_head,
    };
    config.validate().map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
    Ok(config)
}

fn write_params(w: &mut Writer, model: &SegModel) {
    let params = model.params();
    w.u64(params.len() as u64);
    for t in params {
        w.u32(t.rank() as u32);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        t.values().iter().for_each(|&v| w.f64(v));
    }
}

/// Reads weights into a freshly built model of `config`, checking shapes.
fn read_params(r: &mut Reader<'_>, config: ModelConfig) -> Result<SegModel> {
    let mut model = SegModel::new(config)?;
    let count = r.len()?;
    let mut slots = model.params_mut();
    if count != slots.len() {
        return Err(Error::ArchitectureMismatch(format!(
            "checkpoint holds {count} tensors, model has {}",
            slots.len()
        )));
    }
    for slot in slots.iter_mut() {
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Data(format!("tensor rank {rank} in checkpoint")));
        }
        let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        if dims != slot.shape() {
            return Err(Error::ArchitectureMismatch(format!(
                "tensor {dims:?} where the model expects {:?}",
                slot.shape()
            )));
        }
        let values = (0..slot.numel()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        **slot = Tensor::new(dims, values)?;
    }
    drop(slots);
    Ok(model)
}

fn write_bank(w: &mut Writer, b: &MemoryBank) {
    w.u64(b.num_classes() as u64);
    w.u64(b.dim() as u64);
    w.f64(b.t0);
    w.f64(b.power);
    for &f in b.initialized_flags() {
        w.u8(f as u8);
    }
    b.raw_features().iter().for_each(|&v| w.f64(v));
}

fn read_bank(r: &mut Reader<'_>, domain: Domain) -> Result<MemoryBank> {
    let (c, d) = (r.len()?, r.len()?);
    let (t0, power) = (r.f64()?, r.f64()?);
    let flags = (0..c).map(|_| Ok(r.u8()? != 0)).collect::<Result<Vec<_>>>()?;
    let features = (0..c * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    MemoryBank::from_parts(domain, c, d, features, flags, t0, power)
}
