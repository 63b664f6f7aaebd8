//! Binary model file format (`.prnk`).
//!
//! ```text
//! magic      4 bytes  "PRNK"
//! version    u16      FORMAT_VERSION
//! flags      u16      bit 0: trained
//! input      3 x u32  C, H, W
//! classes    u32
//! n_layers   u32
//! layers     n_layers records (see below)
//! payload    f64 values, for each parameterized layer: weight then bias
//! crc32      u32      over every preceding byte
//! ```
//!
//! All integers and floats are little-endian. Layer records start with a
//! kind byte: `0` conv (`in, out, kernel, stride, pad` as u32, then a mask
//! flag byte and, when set, `out` bytes of 0/1), `1` relu, `2` maxpool
//! (`kernel, stride`), `3` flatten, `4` dense (`inputs, outputs`).

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{LayerParams, LayerSpec, Network};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PRNK";
pub const FORMAT_VERSION: u16 = 1;

const KIND_CONV: u8 = 0;
const KIND_RELU: u8 = 1;
const KIND_MAXPOOL: u8 = 2;
const KIND_FLATTEN: u8 = 3;
const KIND_DENSE: u8 = 4;

pub fn to_bytes(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.is_trained() as u16).to_le_bytes());
    for d in net.input_shape() {
        put_u32(&mut out, d);
    }
    put_u32(&mut out, net.classes());
    put_u32(&mut out, net.layers().len());
    for (i, layer) in net.layers().iter().enumerate() {
        match *layer {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                out.push(KIND_CONV);
                for v in [in_channels, out_channels, kernel, stride, pad] {
                    put_u32(&mut out, v);
                }
                match net.mask(i) {
                    Some(mask) => {
                        out.push(1);
                        out.extend(mask.keep().iter().map(|&k| k as u8));
                    }
                    None => out.push(0),
                }
            }
            LayerSpec::Relu => out.push(KIND_RELU),
            LayerSpec::MaxPool { kernel, stride } => {
                out.push(KIND_MAXPOOL);
                put_u32(&mut out, kernel);
                put_u32(&mut out, stride);
            }
            LayerSpec::Flatten => out.push(KIND_FLATTEN),
            LayerSpec::Dense { inputs, outputs } => {
                out.push(KIND_DENSE);
                put_u32(&mut out, inputs);
                put_u32(&mut out, outputs);
            }
        }
    }
    for i in 0..net.layers().len() {
        if let Some(p) = net.params(i) {
            for v in p.weight.data().iter().chain(p.bias.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 4 + 2 + 4 {
        return Err(Error::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        // A short file fails the checksum too; report it as truncation when
        // the header says more bytes were expected.
        return match parse_header(bytes) {
            Ok(header) if header.total_len > bytes.len() => Err(Error::Truncated),
            _ => Err(Error::Checksum { stored, computed }),
        };
    }
    let header = parse_header(bytes)?;
    if header.total_len != bytes.len() {
        return Err(if header.total_len > bytes.len() {
            Error::Truncated
        } else {
            Error::Corrupt(format!(
                "{} trailing bytes after payload",
                bytes.len() - header.total_len
            ))
        });
    }
    let mut cur = Cursor {
        bytes: body,
        pos: header.payload_start,
    };
    let mut params = Vec::with_capacity(header.layers.len());
    for layer in &header.layers {
        params.push(match layer.param_shapes() {
            Some((ws, bs)) => {
                let weight = read_tensor(&mut cur, ws)?;
                let bias = read_tensor(&mut cur, bs)?;
                Some(LayerParams { weight, bias })
            }
            None => None,
        });
    }
    let mut net = Network::from_parts(
        header.input_shape,
        header.classes,
        header.layers,
        params,
        header.trained,
    )?;
    for (layer, keep) in header.masks {
        net.set_mask(&crate::network::ChannelMask::new(layer, keep)?)?;
    }
    Ok(net)
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

struct Header {
    trained: bool,
    input_shape: [usize; 3],
    classes: usize,
    layers: Vec<LayerSpec>,
    masks: Vec<(usize, Vec<bool>)>,
    payload_start: usize,
    total_len: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut cur = Cursor { bytes, pos: 6 };
    let flags = cur.u16()?;
    let input_shape = [cur.u32()?, cur.u32()?, cur.u32()?];
    let classes = cur.u32()?;
    let n_layers = cur.u32()?;
    let mut layers = Vec::new();
    let mut masks = Vec::new();
    let mut payload = 0usize;
    for i in 0..n_layers {
        let layer = match cur.u8()? {
            KIND_CONV => {
                let (in_channels, out_channels) = (cur.u32()?, cur.u32()?);
                let (kernel, stride, pad) = (cur.u32()?, cur.u32()?, cur.u32()?);
                match cur.u8()? {
                    0 => {}
                    1 => {
                        let keep = cur.take(out_channels)?.iter().map(|&b| b != 0).collect();
                        masks.push((i, keep));
                    }
                    f => return Err(Error::Corrupt(format!("layer {i}: bad mask flag {f}"))),
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                }
            }
            KIND_RELU => LayerSpec::Relu,
            KIND_MAXPOOL => LayerSpec::MaxPool {
                kernel: cur.u32()?,
                stride: cur.u32()?,
            },
            KIND_FLATTEN => LayerSpec::Flatten,
            KIND_DENSE => LayerSpec::Dense {
                inputs: cur.u32()?,
                outputs: cur.u32()?,
            },
            k => return Err(Error::Corrupt(format!("layer {i}: unknown kind {k}"))),
        };
        if let Some((ws, bs)) = layer.param_shapes() {
            let count = |s: &[usize]| s.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            payload = count(&ws)
                .zip(count(&bs))
                .and_then(|(w, b)| w.checked_add(b))
                .and_then(|n| payload.checked_add(n))
                .ok_or_else(|| Error::Corrupt("parameter size overflow".into()))?;
        }
        layers.push(layer);
    }
    let payload_start = cur.pos;
    let total_len = payload
        .checked_mul(8)
        .and_then(|p| p.checked_add(payload_start + 4))
        .ok_or_else(|| Error::Corrupt("payload size overflow".into()))?;
    Ok(Header {
        trained: flags & 1 == 1,
        input_shape,
        classes,
        layers,
        masks,
        payload_start,
        total_len,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_tensor(cur: &mut Cursor<'_>, shape: Vec<usize>) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
    Tensor::new(shape, data).map_err(|e| Error::Corrupt(e.to_string()))
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("dimension exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}
