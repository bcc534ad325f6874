//! Single-file binary checkpoints for the module registry and optimizer.
//!
//! Layout: a fixed magic and format version, the config hash, the modality
//! list, the two phase step counters, then named parameter blobs (name,
//! shape, raw little-endian f32 values) followed by the Adam slots (moments
//! and per-parameter step counts).
//!
//! Every parameter and moment in the system is f32-representable by
//! construction (initialization and each optimizer update round to f32), so
//! this format round-trips training state **bit-exactly**: a run resumed
//! from a checkpoint produces the same parameters as one that never stopped.
//!
//! Loading requires the active [`RunConfig`]: the stored config hash must
//! match, which guarantees the architecture the blobs were saved from is the
//! architecture being rebuilt.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{Modality, ModuleRegistry, ParamSet};
use crate::training::{Adam, AdamSlot};

/// File signature; the trailing byte versions the container, not the format.
pub const MAGIC: &[u8; 8] = b"XMNVSCK1";
/// Bumped when the layout below changes incompatibly.
pub const FORMAT_VERSION: u32 = 1;

/// A complete training snapshot: everything needed to continue a run or to
/// evaluate it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// [`RunConfig::config_hash`] of the run that wrote the file.
    pub config_hash: String,
    /// Global steps completed in the EO pretraining phase.
    pub pretrain_steps_done: u64,
    /// Global steps completed in the joint phase.
    pub joint_steps_done: u64,
    pub registry: ModuleRegistry,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn new(
        cfg: &RunConfig,
        registry: ModuleRegistry,
        optimizer: Adam,
        pretrain_steps_done: u64,
        joint_steps_done: u64,
    ) -> Checkpoint {
        Checkpoint {
            config_hash: cfg.config_hash(),
            pretrain_steps_done,
            joint_steps_done,
            registry,
            optimizer,
        }
    }

    /// Serialize to one file. The byte stream is a pure function of the
    /// checkpoint contents, so equal states write equal files.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, FORMAT_VERSION);
        put_str(&mut buf, &self.config_hash);

        let modalities = self.registry.modalities();
        put_u32(&mut buf, modalities.len() as u32);
        for m in &modalities {
            put_str(&mut buf, m.tag());
        }
        put_u64(&mut buf, self.pretrain_steps_done);
        put_u64(&mut buf, self.joint_steps_done);

        let mut blobs: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        self.registry.visit("", &mut |name, t| {
            blobs.push((name.to_string(), t.shape().to_vec(), t.data().to_vec()));
        });
        put_u32(&mut buf, blobs.len() as u32);
        for (name, shape, data) in &blobs {
            put_str(&mut buf, name);
            put_u32(&mut buf, shape.len() as u32);
            for &d in shape {
                put_u32(&mut buf, d as u32);
            }
            for &v in data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }

        put_u32(&mut buf, self.optimizer.state.len() as u32);
        for (name, slot) in &self.optimizer.state {
            put_str(&mut buf, name);
            put_u64(&mut buf, slot.t);
            put_u32(&mut buf, slot.m.len() as u32);
            for &v in &slot.m {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            for &v in &slot.v {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }

        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, buf)?;
        Ok(())
    }

    /// Read a checkpoint back. Hard errors: bad magic or version, a config
    /// hash that does not match `cfg`, and blobs that do not exactly cover
    /// the rebuilt registry's parameters.
    pub fn load(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
        let buf = fs::read(path)?;
        let mut r = Reader { buf: &buf, pos: 0 };

        let magic = r.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::Data(format!(
                "{} is not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint format v{version}, this build reads v{FORMAT_VERSION}"
            )));
        }
        let config_hash = r.string()?;
        if config_hash != cfg.config_hash() {
            return Err(Error::Config(format!(
                "checkpoint was written under config {} but the active config hashes to {}",
                &config_hash[..12.min(config_hash.len())],
                &cfg.config_hash()[..12]
            )));
        }

        let n_modalities = r.u32()? as usize;
        let mut modalities = Vec::with_capacity(n_modalities);
        for _ in 0..n_modalities {
            modalities.push(r.string()?.parse::<Modality>()?);
        }
        if modalities.is_empty() || modalities[0] != Modality::Eo {
            return Err(Error::Data(
                "checkpoint modality list must start with eo".into(),
            ));
        }
        let pretrain_steps_done = r.u64()?;
        let joint_steps_done = r.u64()?;

        // The config hash matched, so init_eo rebuilds the exact
        // architecture; extra modalities get placeholder clones whose
        // values the blobs overwrite below.
        let mut registry = ModuleRegistry::init_eo(cfg);
        for &m in &modalities[1..] {
            let enc = registry.encoders[&Modality::Eo].clone();
            let den = registry.denoisers[&Modality::Eo].clone();
            registry.encoders.insert(m, enc);
            registry.denoisers.insert(m, den);
        }

        let n_blobs = r.u32()? as usize;
        let mut blobs = std::collections::BTreeMap::new();
        for _ in 0..n_blobs {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.f32_array(numel)?;
            if blobs.insert(name.clone(), (shape, data)).is_some() {
                return Err(Error::Data(format!("duplicate parameter blob {name}")));
            }
        }
        let mut failure: Option<Error> = None;
        let mut restored = 0usize;
        registry.visit_mut("", &mut |name, t| {
            if failure.is_some() {
                return;
            }
            let Some((shape, data)) = blobs.get(name) else {
                failure = Some(Error::Data(format!("checkpoint is missing {name}")));
                return;
            };
            if shape != t.shape() {
                failure = Some(Error::Data(format!(
                    "checkpoint blob {name} has shape {shape:?}, expected {:?}",
                    t.shape()
                )));
                return;
            }
            t.data_mut().copy_from_slice(data);
            restored += 1;
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if restored != blobs.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameter blobs, registry holds {restored}",
                blobs.len()
            )));
        }

        let mut optimizer = Adam::from_config(cfg);
        let n_slots = r.u32()? as usize;
        for _ in 0..n_slots {
            let name = r.string()?;
            let t = r.u64()?;
            let len = r.u32()? as usize;
            let m = r.f32_array(len)?;
            let v = r.f32_array(len)?;
            optimizer.state.insert(name, AdamSlot { m, v, t });
        }
        r.finish()?;

        Ok(Checkpoint {
            config_hash,
            pretrain_steps_done,
            joint_steps_done,
            registry,
            optimizer,
        })
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data("checkpoint file is truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Data("checkpoint string is not UTF-8".into()))
    }

    fn f32_array(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(4 * n)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}
