//! Checkpoints: a JSON manifest next to a flat little-endian `f64` array.
//!
//! `save("run/final.json")` writes `run/final.json` and `run/final.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::mlp::{LayerShape, Mlp};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    /// Present for networks, absent for plain vectors.
    pub layers: Option<Vec<LayerShape>>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub data_file: String,
    pub entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    entries: Vec<Entry>,
    data: Vec<f64>,
}

impl Checkpoint {
    pub fn new(seed: u64) -> Self {
        Self { seed, entries: Vec::new(), data: Vec::new() }
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    fn push(&mut self, name: &str, layers: Option<Vec<LayerShape>>, values: &[f64]) {
        self.entries.push(Entry { name: name.to_string(), layers, offset: self.data.len(), len: values.len() });
        self.data.extend_from_slice(values);
    }

    pub fn push_mlp(&mut self, name: &str, net: &Mlp) {
        self.push(name, Some(net.layers().to_vec()), net.params());
    }

    pub fn push_vec(&mut self, name: &str, values: &[f64]) {
        self.push(name, None, values);
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| NnError::Checkpoint(format!("no entry named {name}")))
    }

    pub fn vec(&self, name: &str) -> Result<&[f64]> {
        let e = self.entry(name)?;
        Ok(&self.data[e.offset..e.offset + e.len])
    }

    pub fn mlp(&self, name: &str) -> Result<Mlp> {
        let e = self.entry(name)?;
        let layers = e
            .layers
            .clone()
            .ok_or_else(|| NnError::Checkpoint(format!("{name} is not a network")))?;
        Mlp::from_parts(layers, self.data[e.offset..e.offset + e.len].to_vec())
    }

    fn data_path(manifest: &Path) -> PathBuf {
        manifest.with_extension("bin")
    }

    pub fn save(&self, manifest_path: impl AsRef<Path>) -> Result<()> {
        let path = manifest_path.as_ref();
        let bin = Self::data_path(path);
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            seed: self.seed,
            data_file: bin.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            entries: self.entries.clone(),
        };
        fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(bin, bytes)?;
        Ok(())
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
        }
        let bin = path.with_file_name(&manifest.data_file);
        let bytes = fs::read(bin)?;
        if bytes.len() % 8 != 0 {
            return Err(NnError::Checkpoint("data file length is not a multiple of 8".into()));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        for e in &manifest.entries {
            if e.offset + e.len > data.len() {
                return Err(NnError::Checkpoint(format!("entry {} runs past the data file", e.name)));
            }
        }
        Ok(Self { seed: manifest.seed, entries: manifest.entries, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::MlpSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("harl-nn-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(&MlpSpec::new(&[3, 4, 2]), &mut rng).unwrap();
        let mut ck = Checkpoint::new(42);
        ck.push_mlp("actor", &net);
        ck.push_vec("log_std", &[-0.5, f64::MIN_POSITIVE]);
        let path = dir.join("final.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.mlp("actor").unwrap(), net);
        assert_eq!(back.vec("log_std").unwrap(), &[-0.5, f64::MIN_POSITIVE]);
        assert!(back.mlp("log_std").is_err());
        assert!(back.vec("critic").is_err());
        assert_eq!(fs::metadata(dir.join("final.bin")).unwrap().len(), 8 * (net.n_params() as u64 + 2));
        fs::remove_dir_all(dir).unwrap();
    }
}
