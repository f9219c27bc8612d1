//! Binary tensor container.
//!
//! Layout (all integers little-endian `u64` unless noted):
//!
//! ```text
//! magic    8 bytes  "FEDFRCKP"
//! version  u8       1
//! kind     u8       0 raw | 1 global model | 2 client state | 3 dataset
//! count    u64      number of tensors
//! shapes   count × (rows u64, cols u64)
//! payload  Σ rows·cols × f64 LE, row-major, tensors in declared order
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::{BackboneParams, ClassEmbeddings, DfcBranch, Layer, ProxyRole};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FEDFRCKP";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Raw = 0,
    GlobalModel = 1,
    ClientState = 2,
    Dataset = 3,
}

impl TensorKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(TensorKind::Raw),
            1 => Some(TensorKind::GlobalModel),
            2 => Some(TensorKind::ClientState),
            3 => Some(TensorKind::Dataset),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile<T> {
    pub kind: TensorKind,
    pub tensors: Vec<Matrix<T>>,
}

impl<T: Scalar> TensorFile<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_tensors(&mut out, self).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_tensors(&mut &bytes[..])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn expect_kind(self, kind: TensorKind) -> Result<Vec<Matrix<T>>> {
        if self.kind != kind {
            return Err(Error::MalformedHeader(format!(
                "expected a {kind:?} file, found {:?}",
                self.kind
            )));
        }
        Ok(self.tensors)
    }
}

pub fn write_tensors<T: Scalar>(w: &mut impl Write, file: &TensorFile<T>) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION, file.kind as u8])?;
    w.write_all(&(file.tensors.len() as u64).to_le_bytes())?;
    for t in &file.tensors {
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
    }
    for t in &file.tensors {
        for &x in t.as_slice() {
            w.write_all(&x.widen().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::MalformedHeader(format!("header ends before {what}")))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_tensors<T: Scalar>(r: &mut impl Read) -> Result<TensorFile<T>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::MalformedHeader("file shorter than magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::MalformedHeader("bad magic bytes".into()));
    }
    let mut vk = [0u8; 2];
    r.read_exact(&mut vk)
        .map_err(|_| Error::MalformedHeader("missing version".into()))?;
    if vk[0] != CHECKPOINT_VERSION {
        return Err(Error::MalformedHeader(format!("unsupported version {}", vk[0])));
    }
    let kind = TensorKind::from_byte(vk[1])
        .ok_or_else(|| Error::MalformedHeader(format!("unknown kind {}", vk[1])))?;
    let count = read_u64(r, "tensor count")?;
    // every tensor costs 16 header bytes; reject absurd counts before allocating
    if count > (1 << 24) {
        return Err(Error::MalformedHeader(format!("implausible tensor count {count}")));
    }
    let mut shapes = Vec::with_capacity(count as usize);
    let mut total: usize = 0;
    for i in 0..count {
        let rows = read_u64(r, &format!("rows of tensor {i}"))? as usize;
        let cols = read_u64(r, &format!("cols of tensor {i}"))? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| total.checked_add(n))
            .ok_or_else(|| Error::MalformedHeader(format!("tensor {i} size overflows")))?;
        total = n;
        shapes.push((rows, cols));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)
        .map_err(|e| Error::MalformedHeader(format!("read failed: {e}")))?;
    let expected = total
        .checked_mul(8)
        .ok_or_else(|| Error::MalformedHeader("payload size overflows".into()))?;
    if payload.len() != expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("chunk of 8"))));
    let tensors = shapes
        .into_iter()
        .map(|(rows, cols)| Matrix::new(rows, cols, values.by_ref().take(rows * cols).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(TensorFile { kind, tensors })
}

fn backbone_tensors<T: Scalar>(b: &BackboneParams<T>) -> Vec<Matrix<T>> {
    b.tensors().into_iter().cloned().collect()
}

fn backbone_from<T: Scalar>(tensors: &mut std::vec::IntoIter<Matrix<T>>, layers: usize) -> Result<BackboneParams<T>> {
    let mut out = Vec::with_capacity(layers);
    for _ in 0..layers {
        let (Some(w), Some(b)) = (tensors.next(), tensors.next()) else {
            return Err(Error::MalformedHeader("missing backbone tensors".into()));
        };
        out.push(Layer::new(w, b)?);
    }
    BackboneParams::new(out)
}

fn check_backbone<T: Scalar>(b: &BackboneParams<T>, dims: &[usize]) -> Result<()> {
    if b.dims() != dims {
        return Err(Error::CheckpointMismatch(format!(
            "backbone widths {:?}, configuration expects {:?}",
            b.dims(),
            dims
        )));
    }
    Ok(())
}

/// Server-side model: `Θ_g` and `Φ_g`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalCheckpoint<T> {
    pub backbone: BackboneParams<T>,
    pub proxies: ClassEmbeddings<T>,
}

impl<T: Scalar> GlobalCheckpoint<T> {
    pub fn to_file(&self) -> TensorFile<T> {
        let mut tensors = backbone_tensors(&self.backbone);
        tensors.push(self.proxies.matrix().clone());
        TensorFile {
            kind: TensorKind::GlobalModel,
            tensors,
        }
    }

    pub fn from_file(file: TensorFile<T>) -> Result<Self> {
        let tensors = file.expect_kind(TensorKind::GlobalModel)?;
        if tensors.len() < 3 || tensors.len() % 2 == 0 {
            return Err(Error::MalformedHeader(format!(
                "global model needs 2·layers + 1 tensors, found {}",
                tensors.len()
            )));
        }
        let layers = (tensors.len() - 1) / 2;
        let mut it = tensors.into_iter();
        let backbone = backbone_from(&mut it, layers)?;
        let proxies = ClassEmbeddings::new(it.next().expect("count checked"), ProxyRole::Global)?;
        if proxies.dim() != backbone.embed_dim() {
            return Err(Error::CheckpointMismatch(format!(
                "proxies have {} rows, embedding is {}-dim",
                proxies.dim(),
                backbone.embed_dim()
            )));
        }
        Ok(GlobalCheckpoint { backbone, proxies })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(TensorFile::load(path)?)
    }

    /// Verifies shapes against the configured widths and number of shared classes.
    pub fn check_shapes(&self, dims: &[usize], global_classes: usize) -> Result<()> {
        check_backbone(&self.backbone, dims)?;
        if self.proxies.num_classes() != global_classes {
            return Err(Error::CheckpointMismatch(format!(
                "{} shared proxies, configuration expects {global_classes}",
                self.proxies.num_classes()
            )));
        }
        Ok(())
    }
}

/// Everything a client keeps between rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientCheckpoint<T> {
    pub backbone: BackboneParams<T>,
    pub shared_proxies: ClassEmbeddings<T>,
    pub private_proxies: ClassEmbeddings<T>,
    pub dfc: DfcBranch<T>,
}

impl<T: Scalar> ClientCheckpoint<T> {
    pub fn to_file(&self) -> TensorFile<T> {
        let mut tensors = backbone_tensors(&self.backbone);
        tensors.extend([
            self.shared_proxies.matrix().clone(),
            self.private_proxies.matrix().clone(),
            self.dfc.transform.clone(),
            self.dfc.transform_bias.clone(),
            self.dfc.binary_weights.clone(),
            Matrix::scalar(self.dfc.bias),
        ]);
        TensorFile {
            kind: TensorKind::ClientState,
            tensors,
        }
    }

    pub fn from_file(file: TensorFile<T>) -> Result<Self> {
        let tensors = file.expect_kind(TensorKind::ClientState)?;
        if tensors.len() < 8 || tensors.len() % 2 == 1 {
            return Err(Error::MalformedHeader(format!(
                "client state needs 2·layers + 6 tensors, found {}",
                tensors.len()
            )));
        }
        let layers = (tensors.len() - 6) / 2;
        let mut it = tensors.into_iter();
        let backbone = backbone_from(&mut it, layers)?;
        let mut next = || it.next().expect("count checked");
        let shared_proxies = ClassEmbeddings::new(next(), ProxyRole::Global)?;
        let private_proxies = ClassEmbeddings::new(next(), ProxyRole::Local)?;
        let (transform, transform_bias, omega, bias) = (next(), next(), next(), next());
        if bias.shape() != (1, 1) {
            return Err(Error::MalformedHeader("branch bias must be 1x1".into()));
        }
        let dfc = DfcBranch::new(transform, transform_bias, omega, bias.get(0, 0))?;
        Ok(ClientCheckpoint {
            backbone,
            shared_proxies,
            private_proxies,
            dfc,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(TensorFile::load(path)?)
    }
}
