//! DOEB: the binary container for embeddings, labels, sampling provenance
//! and model weights.
//!
//! ```text
//! magic      "DOEB"                       4 bytes
//! version    u16 = 1
//! flags      u16   bit0 labels, bit1 provenance, bit2 weights
//! count      u64
//! dim        u32
//! reserved   u32 = 0
//! payload    count × dim f32, row-major
//! labels     count × i32                              (bit0)
//! provenance count × {class_id i32, anchor i64, knn f64} (bit1)
//! weights    u32 tensor count, then per tensor:       (bit2)
//!            rank u32, dims u32[rank], f32 data
//! ```
//!
//! All integers and floats are little-endian. Decoding is strict: unknown
//! flag bits, a nonzero reserved word and trailing bytes are all errors, so
//! any file that decodes re-encodes to the same bytes.

use std::path::Path;

use crate::detector::DetectorModel;
use crate::embeddings::{EmbeddingMatrix, PrototypeBank};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::sampler::OutlierBatch;
use crate::space::{EncoderHead, LabeledFeatures};

pub const MAGIC: [u8; 4] = *b"DOEB";
pub const VERSION: u16 = 1;
pub const FLAG_LABELS: u16 = 1;
pub const FLAG_PROVENANCE: u16 = 1 << 1;
pub const FLAG_WEIGHTS: u16 = 1 << 2;
const KNOWN_FLAGS: u16 = FLAG_LABELS | FLAG_PROVENANCE | FLAG_WEIGHTS;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    pub class_id: i32,
    pub anchor_index: i64,
    pub knn_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Tensor {
    fn from_f64(dims: &[usize], data: &[f64]) -> Self {
        Self {
            dims: dims.iter().map(|&d| d as u32).collect(),
            data: data.iter().map(|&x| x as f32).collect(),
        }
    }

    fn to_f64(&self) -> (Vec<usize>, Vec<f64>) {
        (
            self.dims.iter().map(|&d| d as usize).collect(),
            self.data.iter().map(|&x| f64::from(x)).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Doeb {
    pub count: u64,
    pub dim: u32,
    pub payload: Vec<f32>,
    pub labels: Option<Vec<i32>>,
    pub provenance: Option<Vec<Provenance>>,
    pub weights: Option<Vec<Tensor>>,
}

impl Doeb {
    pub fn flags(&self) -> u16 {
        let mut f = 0;
        if self.labels.is_some() {
            f |= FLAG_LABELS;
        }
        if self.provenance.is_some() {
            f |= FLAG_PROVENANCE;
        }
        if self.weights.is_some() {
            f |= FLAG_WEIGHTS;
        }
        f
    }

    fn check_lengths(&self) -> Result<()> {
        let rows = self.count as usize;
        let bad = |what: &str, expected: usize, actual: usize| {
            Err(Error::invalid(format!("DOEB {what}: expected {expected} entries, got {actual}")))
        };
        if self.payload.len() != rows * self.dim as usize {
            return bad("payload", rows * self.dim as usize, self.payload.len());
        }
        if let Some(l) = &self.labels {
            if l.len() != rows {
                return bad("labels", rows, l.len());
            }
        }
        if let Some(p) = &self.provenance {
            if p.len() != rows {
                return bad("provenance", rows, p.len());
            }
        }
        for t in self.weights.iter().flatten() {
            let n: usize = t.dims.iter().map(|&d| d as usize).product();
            if n != t.data.len() {
                return bad("tensor", n, t.data.len());
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.check_lengths()?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.flags().to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for x in &self.payload {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for l in self.labels.iter().flatten() {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for p in self.provenance.iter().flatten() {
            out.extend_from_slice(&p.class_id.to_le_bytes());
            out.extend_from_slice(&p.anchor_index.to_le_bytes());
            out.extend_from_slice(&p.knn_distance.to_le_bytes());
        }
        if let Some(ws) = &self.weights {
            out.extend_from_slice(&(ws.len() as u32).to_le_bytes());
            for t in ws {
                out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
                for d in &t.dims {
                    out.extend_from_slice(&d.to_le_bytes());
                }
                for x in &t.data {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: format!("bad magic {magic:02x?}, expected \"DOEB\""),
            });
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}")));
        }
        let flags = r.u16()?;
        if flags & !KNOWN_FLAGS != 0 {
            return Err(r.error_at(6, format!("unknown flag bits {:#06x}", flags & !KNOWN_FLAGS)));
        }
        let count = r.u64()?;
        let dim = r.u32()?;
        let reserved = r.u32()?;
        if reserved != 0 {
            return Err(r.error_at(20, format!("reserved word is {reserved}, expected 0")));
        }
        let cells = (count as usize)
            .checked_mul(dim as usize)
            .ok_or_else(|| r.error_at(8, "count × dim overflows".into()))?;
        r.ensure(cells.saturating_mul(4))?;
        let payload = (0..cells).map(|_| r.f32()).collect::<Result<_>>()?;
        let labels = if flags & FLAG_LABELS != 0 {
            r.ensure((count as usize).saturating_mul(4))?;
            Some((0..count).map(|_| r.i32()).collect::<Result<_>>()?)
        } else {
            None
        };
        let provenance = if flags & FLAG_PROVENANCE != 0 {
            r.ensure((count as usize).saturating_mul(20))?;
            Some(
                (0..count)
                    .map(|_| {
                        Ok(Provenance {
                            class_id: r.i32()?,
                            anchor_index: r.i64()?,
                            knn_distance: r.f64()?,
                        })
                    })
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        let weights = if flags & FLAG_WEIGHTS != 0 {
            let n = r.u32()?;
            let mut ws = Vec::new();
            for _ in 0..n {
                let rank = r.u32()?;
                r.ensure((rank as usize).saturating_mul(4))?;
                let dims: Vec<u32> = (0..rank).map(|_| r.u32()).collect::<Result<_>>()?;
                let len = dims
                    .iter()
                    .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                    .ok_or_else(|| r.error_at(r.pos, "tensor size overflows".into()))?;
                r.ensure(len.saturating_mul(4))?;
                let data = (0..len).map(|_| r.f32()).collect::<Result<_>>()?;
                ws.push(Tensor { dims, data });
            }
            Some(ws)
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            count,
            dim,
            payload,
            labels,
            provenance,
            weights,
        })
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    // -- conversions ------------------------------------------------------

    pub fn from_embeddings(m: &EmbeddingMatrix) -> Self {
        Self {
            count: m.rows() as u64,
            dim: m.dim() as u32,
            payload: m.as_slice().iter().map(|&x| x as f32).collect(),
            ..Self::default()
        }
    }

    pub fn embeddings(&self) -> Result<EmbeddingMatrix> {
        EmbeddingMatrix::new(
            self.count as usize,
            self.dim as usize,
            self.payload.iter().map(|&x| f64::from(x)).collect(),
        )
    }

    pub fn from_labeled(data: &LabeledFeatures) -> Self {
        Self {
            labels: Some(data.labels().iter().map(|&y| y as i32).collect()),
            ..Self::from_embeddings(data.features())
        }
    }

    pub fn labeled(&self) -> Result<LabeledFeatures> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| missing_section("labels"))?;
        let labels = labels
            .iter()
            .map(|&y| {
                usize::try_from(y).map_err(|_| Error::LabelOutOfRange {
                    label: i64::from(y),
                    classes: 0,
                })
            })
            .collect::<Result<_>>()?;
        LabeledFeatures::new(self.embeddings()?, labels)
    }

    /// Raw token embeddings, one row per class.
    pub fn from_prototypes(bank: &PrototypeBank) -> Self {
        Self::from_embeddings(&bank.tokens())
    }

    pub fn prototypes(&self) -> Result<PrototypeBank> {
        PrototypeBank::from_tokens_unnamed(&self.embeddings()?)
    }

    pub fn from_outlier_batch(batch: &OutlierBatch) -> Self {
        Self {
            provenance: Some(
                (0..batch.len())
                    .map(|i| Provenance {
                        class_id: batch.class_id[i] as i32,
                        anchor_index: batch.anchor_index[i],
                        knn_distance: batch.knn_distance[i],
                    })
                    .collect(),
            ),
            ..Self::from_embeddings(&batch.embeddings)
        }
    }

    pub fn outlier_batch(&self) -> Result<OutlierBatch> {
        let prov = self
            .provenance
            .as_ref()
            .ok_or_else(|| missing_section("provenance"))?;
        let class_id = prov
            .iter()
            .map(|p| usize::try_from(p.class_id).map_err(|_| Error::invalid(format!("negative class id {}", p.class_id))))
            .collect::<Result<_>>()?;
        Ok(OutlierBatch {
            embeddings: self.embeddings()?,
            anchor_index: prov.iter().map(|p| p.anchor_index).collect(),
            class_id,
            knn_distance: prov.iter().map(|p| p.knn_distance).collect(),
        })
    }

    fn from_tensors(dim: usize, tensors: Vec<Tensor>) -> Self {
        Self {
            count: 0,
            dim: dim as u32,
            weights: Some(tensors),
            ..Self::default()
        }
    }

    fn tensors(&self) -> Result<&[Tensor]> {
        self.weights
            .as_deref()
            .ok_or_else(|| missing_section("weights"))
    }

    /// Encoder checkpoint: one weight/bias tensor pair per layer, `dim` = m.
    pub fn from_head(head: &EncoderHead) -> Self {
        let tensors = head
            .mlp()
            .tensors()
            .iter()
            .map(|(d, x)| Tensor::from_f64(d, x))
            .collect();
        Self::from_tensors(head.output_dim(), tensors)
    }

    pub fn head(&self) -> Result<EncoderHead> {
        let t: Vec<_> = self.tensors()?.iter().map(Tensor::to_f64).collect();
        Ok(EncoderHead::new(Mlp::from_tensors(&t)?))
    }

    /// Detector checkpoint: classifier tensors, then the six φ tensors, then
    /// β as a rank-0 tensor. `dim` is the classifier input dimension.
    pub fn from_detector(model: &DetectorModel) -> Self {
        let mut tensors: Vec<Tensor> = model
            .classifier()
            .tensors()
            .iter()
            .chain(model.phi().tensors().iter())
            .map(|(d, x)| Tensor::from_f64(d, x))
            .collect();
        tensors.push(Tensor {
            dims: vec![],
            data: vec![model.beta() as f32],
        });
        Self::from_tensors(model.input_dim(), tensors)
    }

    pub fn detector(&self) -> Result<DetectorModel> {
        let t = self.tensors()?;
        let (beta, layers) = t
            .split_last()
            .filter(|(b, rest)| b.dims.is_empty() && rest.len() > 6)
            .ok_or_else(|| Error::invalid("detector checkpoint needs classifier, phi and beta tensors"))?;
        let (cls, phi) = layers.split_at(layers.len() - 6);
        let to = |ts: &[Tensor]| ts.iter().map(Tensor::to_f64).collect::<Vec<_>>();
        DetectorModel::new(
            Mlp::from_tensors(&to(cls))?,
            Mlp::from_tensors(&to(phi))?,
            f64::from(beta.data[0]),
        )
    }
}

/// Points at the flags field, which is what says the section is absent.
fn missing_section(name: &str) -> Error {
    Error::Format {
        offset: 6,
        reason: format!("{name} section not present"),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn error_at(&self, offset: usize, reason: String) -> Error {
        Error::Format { offset, reason }
    }

    fn ensure(&self, n: usize) -> Result<()> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error_at(
                self.pos,
                format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        self.ensure(n)?;
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}
