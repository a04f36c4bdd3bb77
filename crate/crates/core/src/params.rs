//! Named parameter storage shared by the model and the optimizer.
//!
//! Parameters are registered once at model construction in a fixed order,
//! so a seed fully determines initialization and the optimizer's moment
//! buffers line up by index. Names use dotted paths ("phrasing.prenet...")
//! whose first component is the checkpoint section.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Mat,
    /// Weight decay applies only to rank-2 weights, not bias/gain rows.
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value, decay });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform init in [-bound, bound] with bound = sqrt(6 / (fan_in + fan_out)).
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let m = Mat::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound));
        self.add(name, m, true)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros(rows, cols), false)
    }

    pub fn add_const(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Mat::from_fn(rows, cols, |_, _| v), false)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamEntry)> {
        self.entries.iter_mut().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// SHA-256 over names, shapes and exact parameter bytes.
    pub fn hash_hex(&self) -> String {
        self.hash_subset((0..self.entries.len()).map(ParamId))
    }

    /// Hash a subset of parameters (e.g. only the discriminator's).
    pub fn hash_subset(&self, ids: impl IntoIterator<Item = ParamId>) -> String {
        let mut h = Sha256::new();
        for id in ids {
            let e = &self.entries[id.0];
            h.update(e.name.as_bytes());
            h.update((e.value.rows() as u64).to_le_bytes());
            h.update((e.value.cols() as u64).to_le_bytes());
            for v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn hash_changes_with_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = ParamStore::new();
        let id = s.add_xavier("a.w", 3, 3, &mut rng);
        let h1 = s.hash_hex();
        s.get_mut(id).data_mut()[0] += 1e-9;
        assert_ne!(h1, s.hash_hex());
    }

    #[test]
    fn same_seed_same_init() {
        let mk = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut s = ParamStore::new();
            s.add_xavier("a.w", 4, 5, &mut rng);
            s.add_xavier("b.w", 2, 2, &mut rng);
            s.hash_hex()
        };
        assert_eq!(mk(), mk());
    }
}
