//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PSCK" | u32 version | u64 config_len | config TOML |
//! u64 step | u64 seed |
//! u32 n_sections | sections... | opt_gen | opt_disc
//! ```
//!
//! Sections group parameters by module ("phrasing", "pause_word",
//! "phoneme_enc", "variance", "decoder", "discriminator"); each parameter
//! stores its dotted name, decay flag, shape and raw f64 values, so a
//! reload is bit-exact. Optimizer moment buffers ride along in id order.
//! RNG streams are derived from (seed, step), so no generator state needs
//! to be stored.

use std::path::Path;

use crate::config::Config;
use crate::model::Model;
use crate::params::{ParamEntry, ParamId};
use crate::tensor::Mat;
use crate::trainer::{AdamState, TrainState};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"PSCK";
const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str16(&mut self, s: &str) {
        let b = s.as_bytes();
        assert!(b.len() <= u16::MAX as usize);
        self.buf.extend_from_slice(&(b.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(b);
    }

    fn mat(&mut self, m: &Mat) {
        self.u32(m.rows() as u32);
        self.u32(m.cols() as u32);
        for v in m.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(&*self.path, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str16(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(&*self.path, "bad utf-8 in name"))
    }

    fn mat(&mut self) -> Result<Mat> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let raw = self.take(8 * rows * cols)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Mat::from_vec(rows, cols, data))
    }
}

fn section_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

fn write_adam(w: &mut Writer, opt: &AdamState) {
    w.u64(opt.t);
    w.u32(opt.m.len() as u32);
    for (m, v) in opt.m.iter().zip(&opt.v) {
        w.mat(m);
        w.mat(v);
    }
}

fn read_adam(r: &mut Reader) -> Result<AdamState> {
    let t = r.u64()?;
    let n = r.u32()? as usize;
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        m.push(r.mat()?);
        v.push(r.mat()?);
    }
    Ok(AdamState { t, m, v })
}

pub fn save(path: &Path, model: &Model, state: &TrainState) -> Result<()> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let cfg_text = toml::to_string(&model.cfg).map_err(|e| Error::Config(e.to_string()))?;
    w.u64(cfg_text.len() as u64);
    w.buf.extend_from_slice(cfg_text.as_bytes());
    w.u64(state.step);
    w.u64(state.seed);

    // group entries by module, preserving first-appearance order
    let mut sections: Vec<(&str, Vec<&ParamEntry>)> = Vec::new();
    for (_, entry) in model.params.iter() {
        let sec = section_of(&entry.name);
        match sections.iter_mut().find(|(s, _)| *s == sec) {
            Some((_, v)) => v.push(entry),
            None => sections.push((sec, vec![entry])),
        }
    }
    w.u32(sections.len() as u32);
    for (name, entries) in &sections {
        w.str16(name);
        w.u32(entries.len() as u32);
        for e in entries {
            w.str16(&e.name);
            w.u8(e.decay as u8);
            w.mat(&e.value);
        }
    }
    write_adam(&mut w, &state.opt_gen);
    write_adam(&mut w, &state.opt_disc);
    crate::pst::atomic_write(path, &w.buf)
}

pub fn load(path: &Path) -> Result<(Model, TrainState)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { buf: &bytes, pos: 0, path: path.display().to_string() };
    if r.take(4)? != MAGIC {
        return Err(Error::format(&*r.path, "not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(&*r.path, format!("unsupported version {version}")));
    }
    let cfg_len = r.u64()? as usize;
    let cfg_text = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|_| Error::format(&*r.path, "bad config encoding"))?;
    let cfg: Config =
        toml::from_str(&cfg_text).map_err(|e| Error::format(&*r.path, e.to_string()))?;
    let step = r.u64()?;
    let seed = r.u64()?;

    let mut model = Model::new(&cfg, seed)?;
    let mut seen = 0usize;
    let n_sections = r.u32()? as usize;
    for _ in 0..n_sections {
        let _section = r.str16()?;
        let n_params = r.u32()? as usize;
        for _ in 0..n_params {
            let name = r.str16()?;
            let _decay = r.u8()?;
            let value = r.mat()?;
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| Error::format(&*r.path, format!("unknown parameter {name}")))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(Error::format(
                    &*r.path,
                    format!("parameter {name} shape mismatch: {:?} vs {:?}", slot.shape(), value.shape()),
                ));
            }
            *slot = value;
            seen += 1;
        }
    }
    if seen != model.params.len() {
        return Err(Error::format(
            &*r.path,
            format!("checkpoint has {seen} parameters, model expects {}", model.params.len()),
        ));
    }

    let opt_gen = read_adam(&mut r)?;
    let opt_disc = read_adam(&mut r)?;
    if opt_gen.m.len() != model.gen_ids.len() || opt_disc.m.len() != model.disc_ids.len() {
        return Err(Error::format(&*r.path, "optimizer state does not match parameter lists"));
    }
    Ok((model, TrainState { step, seed, opt_gen, opt_disc }))
}
