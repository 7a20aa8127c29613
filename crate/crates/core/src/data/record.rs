//! TXF1 feature-record files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TXF1"
//! u32 id_len, id bytes (UTF-8)
//! u32 label scale (0 = three, 1 = one)
//! f32 label
//! 6 × (u32 rows, u32 cols)   text, audio, video, expl_audio, expl_video, comments
//! row-major f32 payload for each field, same order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TXF1";

/// Label range of a dataset: `[-3, 3]` (MOSI/MOSEI style) or `[-1, 1]` (SIMS style).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum LabelScale {
    Three,
    One,
}

impl LabelScale {
    pub fn bound(self) -> f64 {
        match self {
            LabelScale::Three => 3.0,
            LabelScale::One => 1.0,
        }
    }

    fn code(self) -> u32 {
        match self {
            LabelScale::Three => 0,
            LabelScale::One => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(LabelScale::Three),
            1 => Some(LabelScale::One),
            _ => None,
        }
    }
}

/// Feature widths of the three modality encoders. Explanation and comment
/// embeddings share the text width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub text: usize,
    pub audio: usize,
    pub video: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub text: Tensor<f32>,
    pub audio: Tensor<f32>,
    pub video: Tensor<f32>,
    pub expl_audio: Tensor<f32>,
    pub expl_video: Tensor<f32>,
    pub comments: Tensor<f32>,
    pub label: f32,
    pub label_scale: LabelScale,
}

impl FeatureRecord {
    fn fields(&self) -> [(&'static str, &Tensor<f32>); 6] {
        [
            ("text", &self.text),
            ("audio", &self.audio),
            ("video", &self.video),
            ("expl_audio", &self.expl_audio),
            ("expl_video", &self.expl_video),
            ("comments", &self.comments),
        ]
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            text: self.text.cols(),
            audio: self.audio.cols(),
            video: self.video.cols(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in self.fields() {
            if t.shape().len() != 2 {
                return Err(Error::Data(format!("{}: field {name} must be a matrix", self.id)));
            }
            if !t.is_finite() {
                return Err(Error::Data(format!("{}: field {name} has non-finite entries", self.id)));
            }
        }
        let dt = self.text.cols();
        for (name, t) in [
            ("expl_audio", &self.expl_audio),
            ("expl_video", &self.expl_video),
            ("comments", &self.comments),
        ] {
            if t.cols() != dt {
                return Err(Error::Data(format!(
                    "{}: {name} width {} differs from text width {dt}",
                    self.id,
                    t.cols()
                )));
            }
        }
        let bound = self.label_scale.bound() as f32;
        if !self.label.is_finite() || self.label.abs() > bound {
            return Err(Error::Data(format!(
                "{}: label {} outside [-{bound}, {bound}]",
                self.id, self.label
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.id.as_bytes());
        out.extend_from_slice(&self.label_scale.code().to_le_bytes());
        out.extend_from_slice(&self.label.to_le_bytes());
        for (_, t) in self.fields() {
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        }
        for (_, t) in self.fields() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        Self::parse(buf, None)
    }

    /// Parses a record and rejects feature widths that differ from `expected`.
    pub fn from_bytes_checked(buf: &[u8], expected: &FeatureDims) -> Result<Self> {
        Self::parse(buf, Some(expected))
    }

    fn parse(buf: &[u8], expected: Option<&FeatureDims>) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {:?}, expected \"TXF1\"", String::from_utf8_lossy(magic)),
            });
        }
        let id_len = r.u32()? as usize;
        let at = r.pos;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|e| Error::Format {
                offset: at,
                message: format!("record id is not UTF-8: {e}"),
            })?
            .to_string();
        let at = r.pos;
        let label_scale = LabelScale::from_code(r.u32()?).ok_or_else(|| Error::Format {
            offset: at,
            message: "unknown label scale code".into(),
        })?;
        let label = r.f32()?;

        const NAMES: [&str; 6] = ["text", "audio", "video", "expl_audio", "expl_video", "comments"];
        let mut shapes = [(0usize, 0usize, 0usize); 6];
        for (k, name) in NAMES.iter().enumerate() {
            let at = r.pos;
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            if rows == 0 || cols == 0 {
                return Err(Error::Format {
                    offset: at,
                    message: format!("field {name} has an empty shape {rows}×{cols}"),
                });
            }
            if let Some(exp) = expected {
                let want = match k {
                    1 => exp.audio,
                    2 => exp.video,
                    _ => exp.text,
                };
                if cols != want {
                    return Err(Error::Format {
                        offset: at + 4,
                        message: format!("field {name} has width {cols}, manifest declares {want}"),
                    });
                }
            }
            shapes[k] = (rows, cols, at);
        }
        let mut tensors = Vec::with_capacity(6);
        for (rows, cols, _) in shapes {
            let data = r.f32s(rows * cols)?;
            tensors.push(Tensor::new(&[rows, cols], data)?);
        }
        if r.pos != buf.len() {
            return Err(Error::Format {
                offset: r.pos,
                message: format!("{} trailing bytes", buf.len() - r.pos),
            });
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("six fields parsed");
        let rec = FeatureRecord {
            id,
            text: next(),
            audio: next(),
            video: next(),
            expl_audio: next(),
            expl_video: next(),
            comments: next(),
            label,
            label_scale,
        };
        rec.validate()?;
        Ok(rec)
    }
}

pub(crate) struct Reader<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("truncated payload: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

pub fn write_feature_file(record: &FeatureRecord, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    record.validate()?;
    fs::write(path, record.to_bytes()).map_err(Error::at_path(path))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureRecord> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(Error::at_path(path))?;
    FeatureRecord::from_bytes(&buf)
}
