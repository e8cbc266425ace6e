//! Binary weight file.
//!
//! ```text
//! magic  "HLOC"
//! u16    format version
//! u32    tensor count
//! per tensor:
//!   u16 name length, UTF-8 name
//!   u8  partition (0 encoder, 1 decoder, 2 count_head)
//!   u8  rank, then rank × u32 dims
//!   f32 data (product of dims values)
//! ```
//!
//! All integers and floats are little-endian. The architecture is recovered
//! from the tensor shapes; the input size is not stored and defaults to the
//! [`NetConfig`] default (callers may override with
//! [`ModelParams::with_input_size`]).

use std::io::{Read, Write};

use super::{ModelParams, NetConfig, Partition, Tensor};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"HLOC";
pub const WEIGHTS_VERSION: u16 = 1;

pub fn write_weights<W: Write>(params: &ModelParams, mut out: W) -> Result<()> {
    out.write_all(WEIGHTS_MAGIC)?;
    out.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    out.write_all(&(params.tensors().len() as u32).to_le_bytes())?;
    for t in params.tensors() {
        let name = t.name.as_bytes();
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&[t.partition.to_byte(), t.shape.len() as u8])?;
        for &d in &t.shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.data.len());
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated weight file".into()),
        _ => Error::Io(e),
    })?;
    Ok(b)
}

fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let name_len = u16::from_le_bytes(read_exact(r)?) as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)
        .map_err(|_| Error::Format("truncated tensor name".into()))?;
    let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
    let [part, rank] = read_exact::<_, 2>(r)?;
    let partition = Partition::from_byte(part)
        .ok_or_else(|| Error::Format(format!("unknown partition byte {part} for {name}")))?;
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(read_exact(r)?) as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; 4 * n];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Format(format!("truncated data for {name}")))?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Tensor {
        name,
        partition,
        shape,
        data,
    })
}

/// Architecture implied by the tensor shapes.
fn infer_config(tensors: &[Tensor]) -> Result<NetConfig> {
    let shape = |name: &str| {
        tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.shape.clone())
            .ok_or_else(|| Error::Shape(format!("weight file lacks tensor {name}")))
    };
    let blocks = tensors
        .iter()
        .filter(|t| t.name.starts_with("enc") && t.name.ends_with(".conv1.weight"))
        .count();
    let base = shape("enc0.conv1.weight")?[0];
    let cap = (0..blocks)
        .map(|b| shape(&format!("enc{b}.conv1.weight")).map(|s| s[0]))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .max()
        .unwrap_or(base);
    let hidden = shape("count.fc1.weight")?[0];
    Ok(NetConfig {
        input_size: NetConfig::default().input_size.max(1 << blocks),
        encoder_blocks: blocks,
        base_channels: base,
        channel_cap: cap,
        count_head_hidden: hidden,
    })
}

pub fn read_weights<R: Read>(mut input: R) -> Result<ModelParams> {
    let magic: [u8; 4] = read_exact(&mut input)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = u16::from_le_bytes(read_exact(&mut input)?);
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported weight format version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut input)?) as usize;
    let tensors = (0..count)
        .map(|_| read_tensor(&mut input))
        .collect::<Result<Vec<_>>>()?;
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    let config = infer_config(&tensors)?;
    ModelParams::from_tensors(config, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;

    fn sample_bytes() -> (ModelParams, Vec<u8>) {
        let cfg = NetConfig {
            encoder_blocks: 2,
            base_channels: 4,
            channel_cap: 6,
            ..NetConfig::default()
        };
        let p = init_params(cfg, 9).unwrap();
        let mut buf = Vec::new();
        write_weights(&p, &mut buf).unwrap();
        (p, buf)
    }

    #[test]
    fn header_layout() {
        let (p, buf) = sample_bytes();
        assert_eq!(&buf[..4], b"HLOC");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(u32::from_le_bytes([buf[6], buf[7], buf[8], buf[9]]) as usize, p.tensors().len());
        let name_len = u16::from_le_bytes([buf[10], buf[11]]) as usize;
        assert_eq!(&buf[12..12 + name_len], b"enc0.conv1.weight");
        assert_eq!(buf[12 + name_len], 0);
        assert_eq!(buf[13 + name_len], 4);
    }

    #[test]
    fn roundtrip_rounds_to_f32() {
        let (p, buf) = sample_bytes();
        let back = read_weights(&buf[..]).unwrap();
        assert_eq!(back.config(), p.config());
        for (a, b) in back.tensors().iter().zip(p.tensors()) {
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        // A second write of the loaded weights is byte-identical.
        let mut again = Vec::new();
        write_weights(&back, &mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let (_, buf) = sample_bytes();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_weights(&bad[..]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(read_weights(&bad[..]), Err(Error::Format(_))));
        assert!(matches!(read_weights(&buf[..buf.len() - 3]), Err(Error::Format(_))));
        let mut bad = buf;
        bad.push(0);
        assert!(matches!(read_weights(&bad[..]), Err(Error::Format(_))));
    }
}
