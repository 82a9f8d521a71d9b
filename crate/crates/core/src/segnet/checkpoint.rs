//! Checkpoint layout: an 8-byte little-endian header length, a JSON header,
//! then one CSCT tensor per name listed in the header, in that order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SegNet, SegNetConfig};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::{read_tensor_as, write_tensor, DType, Scalar, Tensor};

pub const CHECKPOINT_FORMAT: &str = "cascsc-segnet";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dtype: DType,
    config: SegNetConfig,
    tensors: Vec<String>,
}

fn named_tensors<T: Scalar>(net: &SegNet<T>) -> Vec<(String, Tensor<T>)> {
    let mut out: Vec<(String, Tensor<T>)> = net
        .params
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    for (name, st) in net.buffers() {
        out.push((
            format!("{name}.running_mean"),
            Tensor::channel_vector(st.mean.clone()),
        ));
        out.push((
            format!("{name}.running_var"),
            Tensor::channel_vector(st.var.clone()),
        ));
    }
    out
}

pub fn save_checkpoint<T: Scalar>(net: &SegNet<T>, path: &Path) -> Result<()> {
    let tensors = named_tensors(net);
    let header = Header {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE,
        config: net.cfg.clone(),
        tensors: tensors.iter().map(|(n, _)| n.clone()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, t) in &tensors {
        write_tensor(&mut out, t)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<SegNet<T>> {
    let mut input = BufReader::new(File::open(path)?);
    let mut len = [0u8; 8];
    input
        .read_exact(&mut len)
        .map_err(|_| Error::format(0, "truncated checkpoint header length"))?;
    let len = usize::try_from(u64::from_le_bytes(len))
        .map_err(|_| Error::format(0, "header length overflows"))?;
    if len > 1 << 24 {
        return Err(Error::format(0, format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    input
        .read_exact(&mut json)
        .map_err(|_| Error::format(8, "truncated checkpoint header"))?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| Error::format(8, format!("bad header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            8,
            format!(
                "unsupported checkpoint {} v{}",
                header.format, header.version
            ),
        ));
    }
    if header.dtype != T::DTYPE {
        return Err(Error::format(
            8,
            format!(
                "checkpoint holds {:?}, expected {:?}",
                header.dtype,
                T::DTYPE
            ),
        ));
    }
    // Initial values are overwritten below; the seed only has to be valid.
    let mut net = SegNet::<T>::new(header.config, &mut stream(0, Stream::Init))?;
    let expected: Vec<String> = named_tensors(&net).into_iter().map(|(n, _)| n).collect();
    if expected != header.tensors {
        return Err(Error::format(
            8,
            "tensor list does not match the architecture",
        ));
    }
    let mut offset = 8 + len;
    let mut loaded = Vec::with_capacity(expected.len());
    for name in &expected {
        let t = read_tensor_as::<T, _>(&mut input, offset)?;
        offset += 7 + 32 + t.numel() * T::DTYPE.size();
        loaded.push((name, t));
    }
    let mut rest = loaded.into_iter();
    for p in net.params.iter_mut() {
        let (name, t) = rest.next().expect("count checked");
        if t.shape() != p.value.shape() {
            return Err(Error::Data(format!(
                "{name}: shape {:?}, expected {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    for (name, st) in net.buffers_mut() {
        for target in [&mut st.mean, &mut st.var] {
            let (_, t) = rest.next().expect("count checked");
            if t.numel() != target.len() {
                return Err(Error::Data(format!(
                    "{name}: {} running values, expected {}",
                    t.numel(),
                    target.len()
                )));
            }
            *target = t.into_data();
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;

    fn cfg() -> SegNetConfig {
        SegNetConfig {
            in_channels: 1,
            n_classes: 3,
            encoder_channels: vec![2, 3, 4],
            decoder_channels: vec![3, 2],
            kernel_size: 3,
            iterations: vec![2, 1],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = stream(5, Stream::Init);
        let mut net = SegNet::<f32>::new(cfg(), &mut rng).unwrap();
        let x = Tensor::randn([2, 1, 8, 8], &mut rng);
        // Train-mode pass moves the running statistics off their initial values.
        net.logits(&x, Mode::Train).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let mut back = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back.config(), net.config());
        for (a, b) in named_tensors(&net).iter().zip(named_tensors(&back).iter()) {
            assert_eq!(a.0, b.0);
            assert!(
                a.1.data()
                    .iter()
                    .zip(b.1.data())
                    .all(|(p, q)| p.to_bits() == q.to_bits()),
                "{}",
                a.0
            );
        }
        let (ya, yb) = (
            net.logits(&x, Mode::Eval).unwrap(),
            back.logits(&x, Mode::Eval).unwrap(),
        );
        assert_eq!(ya, yb);
    }

    #[test]
    fn wrong_dtype_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let net = SegNet::<f32>::new(cfg(), &mut stream(5, Stream::Init)).unwrap();
        save_checkpoint(&net, &path).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(Error::Format { .. })
        ));
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(Error::Format { .. })
        ));
        std::fs::write(&path, &bytes[..4]).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
