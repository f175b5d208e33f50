//! Checkpoint files: a magic line, a one-line JSON manifest, then a
//! contiguous little-endian f32 payload.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::layers::ModelDims;
use crate::metrics::Phase;
use crate::tensor::Tensor;

pub const MAGIC: &str = "TEXTGAN-CKPT 1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Element count.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub seed: u64,
    pub dims: ModelDims,
    pub disc_width: usize,
    pub phase: Phase,
    /// Last completed iteration of `phase`.
    pub iteration: usize,
    pub vocab: Vec<String>,
    pub baseline: Option<f64>,
    /// True for the dump written when a run aborts.
    pub diagnostic: bool,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

fn format_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Format { line, msg: msg.into() }
}

impl Checkpoint {
    /// Builds a checkpoint; the manifest's tensor index is overwritten.
    pub fn new(mut manifest: Manifest, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut entries = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        let mut index = HashMap::new();
        let mut offset = 0;
        for (name, t) in named {
            if index.insert(name.clone(), tensors.len()).is_some() {
                return Err(Error::Contract(format!("duplicate checkpoint tensor {name}")));
            }
            entries.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
                len: t.numel(),
            });
            offset += 4 * t.numel();
            tensors.push(t);
        }
        manifest.tensors = entries;
        Ok(Checkpoint { manifest, tensors, index })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    /// Named tensors whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.manifest
            .tensors
            .iter()
            .zip(&self.tensors)
            .filter(move |(e, _)| e.name.starts_with(prefix))
            .map(|(e, t)| (e.name.as_str(), t))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let json = serde_json::to_string(&self.manifest).map_err(|e| Error::Contract(e.to_string()))?;
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "{json}")?;
        let mut buf = Vec::new();
        for t in &self.tensors {
            buf.clear();
            buf.extend(t.data().iter().flat_map(|x| x.to_le_bytes()));
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(format_err(1, format!("expected {MAGIC:?}")));
        }
        line.clear();
        r.read_line(&mut line)?;
        let manifest: Manifest = serde_json::from_str(line.trim_end()).map_err(|e| format_err(2, e.to_string()))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let mut named = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let end = e.offset + 4 * e.len;
            if end > payload.len() || e.shape.iter().product::<usize>() != e.len {
                return Err(format_err(3, format!("tensor {} out of bounds or misshapen", e.name)));
            }
            let data = payload[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            named.push((e.name.clone(), Tensor::from_raw(e.shape.clone(), data)?));
        }
        let expected: usize = manifest.tensors.iter().map(|e| 4 * e.len).sum();
        if expected != payload.len() {
            return Err(format_err(3, format!("payload has {} bytes, index covers {expected}", payload.len())));
        }
        let original = manifest.tensors.clone();
        let ck = Checkpoint::new(manifest, named)?;
        if ck.manifest.tensors != original {
            return Err(format_err(2, "tensor index is not contiguous"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn manifest() -> Manifest {
        let config = RunConfig::default();
        Manifest {
            seed: config.run.seed,
            dims: config.model.dims(10),
            disc_width: 8,
            config,
            phase: Phase::Pretrain,
            iteration: 3,
            vocab: vec!["<pad>".into(), "a b".into()],
            baseline: Some(-1.25),
            diagnostic: false,
            tensors: vec![],
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(bits in prop::collection::vec(any::<u32>(), 0..40), split in 0usize..40) {
            let vals: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let k = split.min(vals.len());
            let named = vec![
                ("a".to_string(), Tensor::from_raw(vec![k], vals[..k].to_vec()).unwrap()),
                ("b.c".to_string(), Tensor::from_raw(vec![1, vals.len() - k], vals[k..].to_vec()).unwrap()),
                ("s".to_string(), Tensor::scalar(0.5)),
            ];
            let ck = Checkpoint::new(manifest(), named).unwrap();
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(&buf[..]).unwrap();
            prop_assert_eq!(&back.manifest, &ck.manifest);
            for (name, t) in ck.with_prefix("") {
                let u = back.get(name).unwrap();
                prop_assert_eq!(t.shape(), u.shape());
                let tb: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
                let ub: Vec<u32> = u.data().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(tb, ub);
            }
        }
    }

    #[test]
    fn payload_is_little_endian_after_manifest() {
        let ck = Checkpoint::new(manifest(), vec![("x".into(), Tensor::new(vec![2], vec![1.0, -2.0]).unwrap())]).unwrap();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[buf.len() - 8..], &[0, 0, 0x80, 0x3f, 0, 0, 0, 0xc0]);
        let text = String::from_utf8_lossy(&buf);
        assert!(text.starts_with("TEXTGAN-CKPT 1\n{"));
        assert!(text.contains("\"offset\":0"));
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let ck = Checkpoint::new(manifest(), vec![("x".into(), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())]).unwrap();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert!(matches!(Checkpoint::read_from(&buf[..buf.len() - 1]), Err(Error::Format { line: 3, .. })));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::read_from(&extra[..]), Err(Error::Format { .. })));
        assert!(matches!(Checkpoint::read_from(&b"nope\n"[..]), Err(Error::Format { line: 1, .. })));
        assert!(Checkpoint::new(manifest(), vec![("x".into(), Tensor::scalar(1.0)), ("x".into(), Tensor::scalar(2.0))]).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let ck = Checkpoint::new(manifest(), vec![("x".into(), Tensor::scalar(f32::NAN))]).unwrap();
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert!(back.get("x").unwrap().data()[0].is_nan());
        assert!(back.get("y").is_none());
    }
}
