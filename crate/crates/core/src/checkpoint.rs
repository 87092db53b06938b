//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `HMSV`, `u32` version, `u32`-prefixed
//! config text, `u32` count of named `u64` values, `u32` count of named
//! tensors. Names are `u16`-prefixed UTF-8. A tensor is a dtype code (`u8`),
//! rank (`u8`), `u64` dims and the raw payload.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use hmsv_tensor::ops::BatchNormStats;
use hmsv_tensor::{AdamW, DType, Tensor};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::{DifficultyTable, Trainer};

pub const MAGIC: &[u8; 4] = b"HMSV";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub values: Vec<(String, u64)>,
    pub tensors: Vec<(String, TensorData)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn rd<T>(r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| corrupt(format!("truncated or unreadable: {e}")))
}

fn write_name<W: Write>(w: &mut W, name: &str) -> std::io::Result<()> {
    w.write_u16::<LE>(name.len() as u16)?;
    w.write_all(name.as_bytes())
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut buf = vec![0u8; len];
    rd(r.read_exact(&mut buf))?;
    String::from_utf8(buf).map_err(|_| corrupt("invalid UTF-8"))
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        w.write_u32::<LE>(self.config.len() as u32)?;
        w.write_all(self.config.as_bytes())?;
        w.write_u32::<LE>(self.values.len() as u32)?;
        for (name, v) in &self.values {
            write_name(w, name)?;
            w.write_u64::<LE>(*v)?;
        }
        w.write_u32::<LE>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            write_name(w, name)?;
            w.write_u8(t.dtype() as u8)?;
            w.write_u8(t.shape().len() as u8)?;
            for &d in t.shape() {
                w.write_u64::<LE>(d as u64)?;
            }
            match t {
                TensorData::F32(t) => t.data().iter().try_for_each(|&v| w.write_f32::<LE>(v))?,
                TensorData::F64(t) => t.data().iter().try_for_each(|&v| w.write_f64::<LE>(v))?,
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        rd(r.read_exact(&mut magic))?;
        if &magic != MAGIC {
            return Err(corrupt(format!(
                "bad magic {magic:?}; not a checkpoint or unsupported version"
            )));
        }
        let version = rd(r.read_u32::<LE>())?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let len = rd(r.read_u32::<LE>())? as usize;
        let config = read_string(r, len)?;
        let mut values = Vec::new();
        for _ in 0..rd(r.read_u32::<LE>())? {
            let n = rd(r.read_u16::<LE>())? as usize;
            let name = read_string(r, n)?;
            values.push((name, rd(r.read_u64::<LE>())?));
        }
        let mut tensors = Vec::new();
        for _ in 0..rd(r.read_u32::<LE>())? {
            let n = rd(r.read_u16::<LE>())? as usize;
            let name = read_string(r, n)?;
            let code = rd(r.read_u8())?;
            let dtype =
                DType::from_code(code).ok_or_else(|| corrupt(format!("{name}: dtype {code}")))?;
            let rank = rd(r.read_u8())? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(rd(r.read_u64::<LE>())? as usize);
            }
            let numel: usize = shape.iter().product();
            if numel > 1 << 34 {
                return Err(corrupt(format!("{name}: implausible size {shape:?}")));
            }
            let data = match dtype {
                DType::F32 => {
                    let mut v = vec![0f32; numel];
                    rd(r.read_f32_into::<LE>(&mut v))?;
                    TensorData::F32(Tensor::new(&shape, v)?)
                }
                DType::F64 => {
                    let mut v = vec![0f64; numel];
                    rd(r.read_f64_into::<LE>(&mut v))?;
                    TensorData::F64(Tensor::new(&shape, v)?)
                }
            };
            tensors.push((name, data));
        }
        let mut rest = [0u8; 1];
        if rd(r.read(&mut rest))? != 0 {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint {
            config,
            values,
            tensors,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to memory");
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn value(&self, name: &str) -> Result<u64> {
        self.values
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| corrupt(format!("missing value `{name}`")))
    }

    fn tensor(&self, name: &str) -> Option<&TensorData> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn f32(&self, name: &str) -> Result<Tensor<f32>> {
        match self.tensor(name) {
            Some(TensorData::F32(t)) => Ok(t.clone()),
            Some(_) => Err(corrupt(format!("`{name}` is not f32"))),
            None => Err(corrupt(format!("missing tensor `{name}`"))),
        }
    }

    pub fn f64(&self, name: &str) -> Result<Tensor<f64>> {
        match self.tensor(name) {
            Some(TensorData::F64(t)) => Ok(t.clone()),
            Some(_) => Err(corrupt(format!("`{name}` is not f64"))),
            None => Err(corrupt(format!("missing tensor `{name}`"))),
        }
    }

    /// Full training state. Random streams are derived from the seed and
    /// epoch counter, so those two values are the generator state.
    pub fn from_trainer(t: &Trainer, config: &RunConfig) -> Self {
        let mut values = vec![
            ("seed".to_string(), t.seed),
            ("epoch".to_string(), t.epoch as u64),
            ("step".to_string(), t.step),
            ("adam.t".to_string(), t.optimizer.t),
            ("adam.lr".to_string(), t.optimizer.lr.to_bits()),
        ];
        let mut tensors = Vec::new();
        let m = &t.model;
        for (spec, p) in m.specs.iter().zip(&m.params) {
            tensors.push((spec.name.clone(), TensorData::F32(p.clone())));
        }
        for (i, st) in m.bn.iter().enumerate() {
            let c = st.mean.len();
            tensors.push((
                format!("bn{i}.running_mean"),
                TensorData::F32(Tensor::new(&[c], st.mean.clone()).expect("vector")),
            ));
            tensors.push((
                format!("bn{i}.running_var"),
                TensorData::F32(Tensor::new(&[c], st.var.clone()).expect("vector")),
            ));
        }
        for (spec, (mm, vv)) in m.specs.iter().zip(t.optimizer.m.iter().zip(&t.optimizer.v)) {
            tensors.push((format!("adam.m.{}", spec.name), TensorData::F32(mm.clone())));
            tensors.push((format!("adam.v.{}", spec.name), TensorData::F32(vv.clone())));
        }
        let hist = Tensor::new(&[t.val_history.len()], t.val_history.clone()).expect("vector");
        tensors.push(("history.val_dice".into(), TensorData::F64(hist)));
        if let Some(tab) = &t.table {
            values.push(("hem.present".into(), 1));
            let n = tab.scores.len();
            tensors.push((
                "hem.scores".into(),
                TensorData::F64(Tensor::new(&[n], tab.scores.clone()).expect("vector")),
            ));
            tensors.push((
                "hem.weights".into(),
                TensorData::F64(Tensor::new(&[n], tab.weights.clone()).expect("vector")),
            ));
        }
        Checkpoint {
            config: config.to_text(),
            values,
            tensors,
        }
    }

    /// The run configuration and the trainer restored from this checkpoint.
    pub fn to_trainer(&self) -> Result<(RunConfig, Trainer)> {
        let cfg = RunConfig::parse(&self.config)?;
        let specs = crate::model::param_specs(&cfg.model);
        let params = specs
            .iter()
            .map(|s| self.f32(&s.name))
            .collect::<Result<Vec<_>>>()?;
        let mut bn = Vec::new();
        while let (Ok(mean), Ok(var)) = (
            self.f32(&format!("bn{}.running_mean", bn.len())),
            self.f32(&format!("bn{}.running_var", bn.len())),
        ) {
            bn.push(BatchNormStats {
                mean: mean.into_data(),
                var: var.into_data(),
            });
        }
        let model = Model::from_parts(&cfg.model, params, bn)?;
        let mut optimizer = AdamW::with_betas(
            &model.params,
            cfg.schedule.weight_decay,
            cfg.schedule.beta1,
            cfg.schedule.beta2,
            cfg.schedule.adam_eps,
        );
        optimizer.t = self.value("adam.t")?;
        optimizer.lr = f64::from_bits(self.value("adam.lr")?);
        for (i, s) in specs.iter().enumerate() {
            optimizer.m[i] = self.f32(&format!("adam.m.{}", s.name))?;
            optimizer.v[i] = self.f32(&format!("adam.v.{}", s.name))?;
        }
        let table = if self.value("hem.present").is_ok() {
            let weights = self.f64("hem.weights")?.into_data();
            let hard = (0..weights.len()).filter(|&i| weights[i] != 1.0).collect();
            Some(DifficultyTable {
                scores: self.f64("hem.scores")?.into_data(),
                weights,
                hard,
            })
        } else {
            None
        };
        let trainer = Trainer {
            seed: self.value("seed")?,
            schedule: cfg.schedule.clone(),
            loss: cfg.loss.clone(),
            augment: cfg.augment.clone(),
            model,
            optimizer,
            epoch: self.value("epoch")? as usize,
            step: self.value("step")?,
            table,
            val_history: self.f64("history.val_dice")?.into_data(),
        };
        Ok((cfg, trainer))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrong_magic_rejected() {
        let err = Checkpoint::read_from(&mut &b"NOPE\x01\0\0\0"[..]).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn unknown_version_rejected() {
        let mut bytes = Checkpoint::default().to_bytes();
        bytes[4] = 9;
        let err = Checkpoint::read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version 9"));
    }

    #[test]
    fn truncation_rejected() {
        let c = Checkpoint {
            config: "x".into(),
            values: vec![("a".into(), 7)],
            tensors: vec![("t".into(), TensorData::F64(Tensor::ones(&[3])))],
        };
        let bytes = c.to_bytes();
        assert_eq!(Checkpoint::read_from(&mut bytes.as_slice()).unwrap(), c);
        for cut in [5, 12, bytes.len() - 1] {
            assert!(Checkpoint::read_from(&mut &bytes[..cut]).is_err());
        }
    }
}
