//! Model weights file.
//!
//! Layout, all integers little-endian u32 unless noted:
//! magic `"DPRB"`, format version, model name (length + UTF-8), input
//! shape (rank + dims), layer count, then one record per layer: a kind
//! tag, kind-specific shape ints, and little-endian f64 weights and
//! biases for dense/conv layers. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{LayerParams, LayerSpec};
use crate::model::{ModelSpec, Parameters, TrainedModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DPRB";
pub const VERSION: u32 = 1;

const TAG_DENSE: u32 = 0;
const TAG_CONV2D: u32 = 1;
const TAG_MAXPOOL2D: u32 = 2;
const TAG_RELU: u32 = 3;
const TAG_SOFTMAX: u32 = 4;
const TAG_FLATTEN: u32 = 5;

pub fn save(model: &TrainedModel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    write_model(model, &mut w).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<TrainedModel> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path: path.display().to_string(),
    };
    read_model(&mut r)
}

fn write_model(model: &TrainedModel, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_str(w, &model.spec.name)?;
    write_u32(w, model.spec.input_shape.len() as u32)?;
    for &d in &model.spec.input_shape {
        write_u32(w, d as u32)?;
    }
    write_u32(w, model.spec.layers.len() as u32)?;
    for (layer, params) in model.spec.layers.iter().zip(&model.params.layers) {
        match layer {
            LayerSpec::Dense { input, output } => {
                write_u32(w, TAG_DENSE)?;
                write_u32(w, *input as u32)?;
                write_u32(w, *output as u32)?;
                let p = params.as_ref().expect("dense layer has parameters");
                write_f64s(w, p.weights.data())?;
                write_f64s(w, p.bias.data())?;
            }
            LayerSpec::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
            } => {
                write_u32(w, TAG_CONV2D)?;
                for v in [kernel_h, kernel_w, in_channels, out_channels] {
                    write_u32(w, *v as u32)?;
                }
                let p = params.as_ref().expect("conv layer has parameters");
                write_f64s(w, p.weights.data())?;
                write_f64s(w, p.bias.data())?;
            }
            LayerSpec::MaxPool2d => write_u32(w, TAG_MAXPOOL2D)?,
            LayerSpec::Relu => write_u32(w, TAG_RELU)?,
            LayerSpec::Softmax => write_u32(w, TAG_SOFTMAX)?,
            LayerSpec::Flatten => write_u32(w, TAG_FLATTEN)?,
        }
    }
    w.flush()
}

struct Reader<R: Read> {
    inner: R,
    path: String,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Truncated {
            path: self.path.clone(),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.bytes(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let b = self.bytes(len)?;
        String::from_utf8(b).map_err(|_| Error::CorruptRecord(format!("{}: bad name", self.path)))
    }
}

fn read_model<R: Read>(r: &mut Reader<R>) -> Result<TrainedModel> {
    let magic = r.bytes(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: r.path.clone(),
            detail: format!("expected {MAGIC:?}, got {magic:?}"),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CorruptRecord(format!(
            "{}: unsupported weights version {version}",
            r.path
        )));
    }
    let name = r.string()?;
    let rank = r.u32()? as usize;
    let mut input_shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input_shape.push(r.u32()? as usize);
    }
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    let mut params = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let tag = r.u32()?;
        match tag {
            TAG_DENSE => {
                let input = r.u32()? as usize;
                let output = r.u32()? as usize;
                let weights = Tensor::new(vec![output, input], r.f64s(output * input)?)?;
                let bias = Tensor::new(vec![output], r.f64s(output)?)?;
                layers.push(LayerSpec::Dense { input, output });
                params.push(Some(LayerParams { weights, bias }));
            }
            TAG_CONV2D => {
                let kh = r.u32()? as usize;
                let kw = r.u32()? as usize;
                let ic = r.u32()? as usize;
                let oc = r.u32()? as usize;
                let weights = Tensor::new(vec![oc, ic, kh, kw], r.f64s(oc * ic * kh * kw)?)?;
                let bias = Tensor::new(vec![oc], r.f64s(oc)?)?;
                layers.push(LayerSpec::Conv2d {
                    kernel_h: kh,
                    kernel_w: kw,
                    in_channels: ic,
                    out_channels: oc,
                });
                params.push(Some(LayerParams { weights, bias }));
            }
            TAG_MAXPOOL2D => {
                layers.push(LayerSpec::MaxPool2d);
                params.push(None);
            }
            TAG_RELU => {
                layers.push(LayerSpec::Relu);
                params.push(None);
            }
            TAG_SOFTMAX => {
                layers.push(LayerSpec::Softmax);
                params.push(None);
            }
            TAG_FLATTEN => {
                layers.push(LayerSpec::Flatten);
                params.push(None);
            }
            other => {
                return Err(Error::CorruptRecord(format!(
                    "{}: unknown layer tag {other}",
                    r.path
                )))
            }
        }
    }
    let spec = ModelSpec {
        name,
        input_shape,
        layers,
    };
    // Reject files whose stack is internally inconsistent.
    spec.layer_shapes()?;
    Ok(TrainedModel {
        spec,
        params: Parameters { layers: params },
    })
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn write_f64s(w: &mut impl Write, vs: &[f64]) -> std::io::Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn sample_model() -> TrainedModel {
        let spec = ModelSpec {
            name: "sample".into(),
            input_shape: vec![6, 6, 1],
            layers: vec![
                LayerSpec::Conv2d {
                    kernel_h: 3,
                    kernel_w: 3,
                    in_channels: 1,
                    out_channels: 2,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d,
                LayerSpec::Flatten,
                LayerSpec::Dense { input: 8, output: 3 },
                LayerSpec::Softmax,
            ],
        };
        let params = spec.init_params(99).unwrap();
        TrainedModel { spec, params }
    }

    fn to_bytes(model: &TrainedModel) -> Vec<u8> {
        let mut buf = Vec::new();
        write_model(model, &mut buf).unwrap();
        buf
    }

    fn from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
        let mut r = Reader {
            inner: Cursor::new(bytes),
            path: "<mem>".into(),
        };
        read_model(&mut r)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = sample_model();
        let bytes = to_bytes(&model);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        // Serializing the reloaded model reproduces the same bytes.
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = to_bytes(&sample_model());
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = to_bytes(&sample_model());
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(from_bytes(cut), Err(Error::Truncated { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join("deeprobe-weights-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("sample.dprb");
        let model = sample_model();
        save(&model, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, model);
        std::fs::remove_file(&path).ok();
    }
}
