//! Versioned binary checkpoints.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CAPSCKPT"
//! version    u32
//! spec       u32 length + UTF-8 architecture string
//! meta       u32 length + UTF-8 JSON (activation, fuzzy, progress)
//! params     u32 count, then per tensor: u32 name length + name,
//!            u32 rank, u64 dims, f64 values; declaration order
//! bn stats   u32 count, then per layer: u64 channels, f64 means, f64 vars
//! optimizer  u8 flag; when 1: u64 step, f64 lr, beta1, beta2, eps, then
//!            first moments and second moments in parameter order
//! checksum   u32 CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::caps::ArchitectureSpec;
use crate::error::{Error, Result};
use crate::model::CapsNet;
use crate::objectives::ActivationParams;
use crate::routing::FuzzyConfig;
use crate::tensor::{BatchNormStats, Tensor};
use crate::train::{OptimizerState, RunMetrics};

pub const MAGIC: &[u8; 8] = b"CAPSCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Where a run stands: completed epochs and their metrics.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainProgress {
    pub epochs_done: usize,
    pub metrics: RunMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    activation: ActivationParams,
    fuzzy: FuzzyConfig,
    progress: TrainProgress,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: String,
    pub activation: ActivationParams,
    pub fuzzy: FuzzyConfig,
    pub params: Vec<(String, Tensor)>,
    pub bn_running: Vec<BatchNormStats>,
    pub optimizer: Option<OptimizerState>,
    pub progress: TrainProgress,
}

impl Checkpoint {
    pub fn capture(net: &CapsNet, optimizer: Option<&OptimizerState>, progress: &TrainProgress) -> Self {
        Self {
            spec: net.spec().to_string(),
            activation: *net.activation(),
            fuzzy: *net.fuzzy(),
            params: net.layout().iter().map(|p| p.name.clone()).zip(net.params().iter().cloned()).collect(),
            bn_running: net.bn_running().to_vec(),
            optimizer: optimizer.cloned(),
            progress: progress.clone(),
        }
    }

    pub fn architecture(&self) -> Result<ArchitectureSpec> {
        self.spec
            .parse()
            .map_err(|e| Error::Checkpoint(format!("stored architecture {:?} is invalid: {e}", self.spec)))
    }

    /// Rebuilds the network, optimizer and progress.
    pub fn restore(self) -> Result<(CapsNet, Option<OptimizerState>, TrainProgress)> {
        let spec = self.architecture()?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut net = CapsNet::with_options(spec, self.activation, self.fuzzy, &mut rng)?;
        for ((name, t), want) in self.params.iter().zip(net.layout()) {
            if *name != want.name {
                return Err(Error::Checkpoint(format!("parameter {name:?} found where {:?} was expected", want.name)));
            }
            if t.shape() != want.shape.as_slice() {
                return Err(Error::Checkpoint(format!("parameter {name} has shape {:?}, expected {:?}", t.shape(), want.shape)));
            }
        }
        if let Some(opt) = &self.optimizer {
            let ok = opt.m.len() == self.params.len()
                && opt.m.iter().chain(&opt.v).zip(self.params.iter().chain(&self.params)).all(|(m, (_, p))| m.shape() == p.shape());
            if !ok {
                return Err(Error::Checkpoint("optimizer moments do not match the parameters".into()));
            }
        }
        let params = self.params.into_iter().map(|(_, t)| t).collect();
        net.load_state(params, self.bn_running)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok((net, self.optimizer, self.progress))
    }

    /// Fails unless the stored architecture string equals `spec`'s.
    pub fn expect_spec(&self, spec: &ArchitectureSpec) -> Result<()> {
        let want = spec.to_string();
        if self.spec != want {
            return Err(Error::Checkpoint(format!(
                "checkpoint architecture {:?} does not match {want:?}",
                self.spec
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, FORMAT_VERSION);
        put_str(&mut w, &self.spec);
        let meta = Meta {
            activation: self.activation,
            fuzzy: self.fuzzy,
            progress: self.progress.clone(),
        };
        put_str(&mut w, &serde_json::to_string(&meta).expect("metadata serializes"));
        put_u32(&mut w, self.params.len() as u32);
        for (name, t) in &self.params {
            put_str(&mut w, name);
            put_u32(&mut w, t.ndim() as u32);
            for &d in t.shape() {
                w.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut w, t.data());
        }
        put_u32(&mut w, self.bn_running.len() as u32);
        for s in &self.bn_running {
            w.extend_from_slice(&(s.mean.len() as u64).to_le_bytes());
            put_f64s(&mut w, &s.mean);
            put_f64s(&mut w, &s.var);
        }
        match &self.optimizer {
            None => w.push(0),
            Some(o) => {
                w.push(1);
                w.extend_from_slice(&o.step.to_le_bytes());
                put_f64s(&mut w, &[o.lr, o.beta1, o.beta2, o.eps]);
                for t in o.m.iter().chain(&o.v) {
                    put_f64s(&mut w, t.data());
                }
            }
        }
        let crc = crc32fast::hash(&w);
        put_u32(&mut w, crc);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let mut r = Reader { bytes: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch; the file is corrupt".into()));
        }
        let spec = r.string()?;
        let meta: Meta = serde_json::from_str(&r.string()?).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1024));
        let mut shapes = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().product();
            let t = Tensor::new(&shape, r.f64s(len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
            shapes.push(shape);
            params.push((name, t));
        }
        let nb = r.u32()? as usize;
        let mut bn_running = Vec::with_capacity(nb.min(16));
        for _ in 0..nb {
            let c = r.u64()? as usize;
            bn_running.push(BatchNormStats {
                mean: r.f64s(c)?,
                var: r.f64s(c)?,
            });
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let h = r.f64s(4)?;
                let mut moments = Vec::with_capacity(2 * shapes.len());
                for shape in shapes.iter().chain(&shapes) {
                    let len = shape.iter().product();
                    moments.push(Tensor::new(shape, r.f64s(len)?).expect("shape from parameter"));
                }
                let v = moments.split_off(shapes.len());
                Some(OptimizerState {
                    m: moments,
                    v,
                    step,
                    lr: h[0],
                    beta1: h[1],
                    beta2: h[2],
                    eps: h[3],
                })
            }
            f => return Err(Error::Checkpoint(format!("optimizer flag {f} at byte {}", r.pos - 1))),
        };
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after byte {}", body.len() - r.pos, r.pos)));
        }
        Ok(Self {
            spec,
            activation: meta.activation,
            fuzzy: meta.fuzzy,
            params,
            bn_running,
            optimizer,
            progress: meta.progress,
        })
    }

    /// Writes via a temporary file and rename, so a crash never leaves a
    /// half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub fn save_checkpoint(net: &CapsNet, optimizer: Option<&OptimizerState>, progress: &TrainProgress, path: &Path) -> Result<()> {
    Checkpoint::capture(net, optimizer, progress).save(path)
}

/// Loads a checkpoint into a network, checking the architecture when
/// `expected` is given. Nothing is returned unless every check passes.
pub fn load_checkpoint(path: &Path, expected: Option<&ArchitectureSpec>) -> Result<(CapsNet, Option<OptimizerState>, TrainProgress)> {
    let ckpt = Checkpoint::load(path)?;
    if let Some(spec) = expected {
        ckpt.expect_spec(spec)?;
    }
    ckpt.restore()
}

fn put_u32(w: &mut Vec<u8>, x: u32) {
    w.extend_from_slice(&x.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

fn put_f64s(w: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: needed {n} bytes at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
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

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint(format!("invalid UTF-8 at byte {at}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{EpochRecord, OptimizerState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (CapsNet, OptimizerState, TrainProgress) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = CapsNet::new(ArchitectureSpec::tiny(), &mut rng).unwrap();
        let mut opt = OptimizerState::new(net.params(), 1e-3);
        opt.step = 7;
        for t in opt.m.iter_mut().chain(opt.v.iter_mut()) {
            *t = Tensor::rand_uniform(t.shape(), -1.0, 1.0, &mut rng);
        }
        let progress = TrainProgress {
            epochs_done: 1,
            metrics: RunMetrics {
                initial_val_accuracy: 0.1,
                records: vec![EpochRecord {
                    epoch: 1,
                    margin: 0.2,
                    lr: 1e-3,
                    train_loss: 0.1 + 0.2,
                    val_accuracy: 1.0 / 3.0,
                    wall_seconds: 0.0,
                }],
            },
        };
        (net, opt, progress)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (net, opt, progress) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&net, Some(&opt), &progress, &path).unwrap();
        let (net2, opt2, progress2) = load_checkpoint(&path, Some(net.spec())).unwrap();
        assert_eq!(net, net2);
        assert_eq!(Some(opt), opt2);
        assert_eq!(progress, progress2);
    }

    #[test]
    fn wrong_spec_and_corruption_are_rejected() {
        let (net, _, progress) = sample();
        let bytes = Checkpoint::capture(&net, None, &progress).to_bytes();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        let other = ArchitectureSpec::tiny().with_shortcut(false);
        assert!(matches!(ckpt.expect_spec(&other), Err(Error::Checkpoint(_))));

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(m)) if m.contains("checksum")));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]).is_err());
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::Checkpoint(m)) if m.contains("version")));
        assert!(Checkpoint::from_bytes(b"hello").is_err());
    }
}
