//! VBNN model container.
//!
//! Little-endian layout:
//!
//! ```text
//! "VBNN" | version u16 | seed u64 | rank u8 | dims u64*rank | layers u32
//! per layer: kind u8 | fields u64* | activation u8 (dense, conv)
//!            | params u8 | per param: name | rank u8 | dims u64* | f64*
//! extras u32 | per extra: name | len u64 | f64*
//! name = len u16 | utf-8 bytes
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Activation, LayerSpec, Network, NnError, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"VBNN";
pub const MODEL_VERSION: u16 = 1;

/// Named auxiliary vectors stored with a model (e.g. input normalization).
pub type Extras = BTreeMap<String, Vec<f64>>;

fn fmt(msg: impl Into<String>) -> NnError {
    NnError::Format(msg.into())
}

struct Out<W: Write>(W);

impl<W: Write> Out<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<(), NnError> {
        Ok(self.0.write_all(b)?)
    }
    fn u8(&mut self, v: u8) -> Result<(), NnError> {
        self.bytes(&[v])
    }
    fn u16(&mut self, v: u16) -> Result<(), NnError> {
        self.bytes(&v.to_le_bytes())
    }
    fn u32(&mut self, v: u32) -> Result<(), NnError> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> Result<(), NnError> {
        self.bytes(&v.to_le_bytes())
    }
    fn usize(&mut self, v: usize) -> Result<(), NnError> {
        self.u64(v as u64)
    }
    fn f64s(&mut self, v: &[f64]) -> Result<(), NnError> {
        for x in v {
            self.bytes(&x.to_le_bytes())?;
        }
        Ok(())
    }
    fn name(&mut self, s: &str) -> Result<(), NnError> {
        let len = u16::try_from(s.len()).map_err(|_| fmt("name too long"))?;
        self.u16(len)?;
        self.bytes(s.as_bytes())
    }
    fn dims(&mut self, d: &[usize]) -> Result<(), NnError> {
        self.u8(d.len() as u8)?;
        d.iter().try_for_each(|&v| self.usize(v))
    }
}

struct In<R: Read>(R);

impl<R: Read> In<R> {
    fn array<const N: usize>(&mut self) -> Result<[u8; N], NnError> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => fmt("truncated file"),
            _ => NnError::Io(e),
        })?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.array::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16, NnError> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize, NnError> {
        usize::try_from(self.u64()?).map_err(|_| fmt("size overflow"))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, NnError> {
        if n > (1 << 34) {
            return Err(fmt("implausible blob length"));
        }
        (0..n).map(|_| Ok(f64::from_le_bytes(self.array()?))).collect()
    }
    fn name(&mut self) -> Result<String, NnError> {
        let len = self.u16()? as usize;
        let mut b = vec![0u8; len];
        self.0.read_exact(&mut b)?;
        String::from_utf8(b).map_err(|_| fmt("name is not utf-8"))
    }
    fn dims(&mut self) -> Result<Vec<usize>, NnError> {
        let rank = self.u8()? as usize;
        if rank > 3 {
            return Err(fmt(format!("rank {rank}")));
        }
        (0..rank).map(|_| self.usize()).collect()
    }
    fn activation(&mut self) -> Result<Activation, NnError> {
        let c = self.u8()?;
        Activation::from_code(c).ok_or_else(|| fmt(format!("activation code {c}")))
    }
}

pub fn write_model(w: impl Write, net: &Network, extras: &Extras) -> Result<(), NnError> {
    let mut o = Out(w);
    o.bytes(MODEL_MAGIC)?;
    o.u16(MODEL_VERSION)?;
    o.u64(net.seed())?;
    o.dims(net.input_shape())?;
    o.u32(net.layers().len() as u32)?;
    for layer in net.layers() {
        match layer.spec {
            LayerSpec::Dense { inputs, outputs, activation } => {
                o.u8(0)?;
                o.usize(inputs)?;
                o.usize(outputs)?;
                o.u8(activation.code())?;
            }
            LayerSpec::Conv1d { in_channels, filters, extent, stride, padding, activation } => {
                o.u8(1)?;
                for v in [in_channels, filters, extent, stride, padding] {
                    o.usize(v)?;
                }
                o.u8(activation.code())?;
            }
            LayerSpec::MaxPool1d { extent, stride } => {
                o.u8(2)?;
                o.usize(extent)?;
                o.usize(stride)?;
            }
            LayerSpec::Lstm { inputs, units } => {
                o.u8(3)?;
                o.usize(inputs)?;
                o.usize(units)?;
            }
        }
        o.u8(layer.params.len() as u8)?;
        for (name, p) in layer.spec.param_names().iter().zip(&layer.params) {
            o.name(name)?;
            o.dims(p.shape())?;
            o.f64s(p.data())?;
        }
    }
    o.u32(extras.len() as u32)?;
    for (name, v) in extras {
        o.name(name)?;
        o.usize(v.len())?;
        o.f64s(v)?;
    }
    Ok(())
}

pub fn read_model(r: impl Read) -> Result<(Network, Extras), NnError> {
    let mut i = In(r);
    if &i.array::<4>()? != MODEL_MAGIC {
        return Err(fmt("not a VBNN file"));
    }
    let version = i.u16()?;
    if version != MODEL_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let seed = i.u64()?;
    let input_shape = i.dims()?;
    let count = i.u32()?;
    let mut parts = Vec::new();
    for _ in 0..count {
        let spec = match i.u8()? {
            0 => LayerSpec::Dense { inputs: i.usize()?, outputs: i.usize()?, activation: i.activation()? },
            1 => LayerSpec::Conv1d {
                in_channels: i.usize()?,
                filters: i.usize()?,
                extent: i.usize()?,
                stride: i.usize()?,
                padding: i.usize()?,
                activation: i.activation()?,
            },
            2 => LayerSpec::MaxPool1d { extent: i.usize()?, stride: i.usize()? },
            3 => LayerSpec::Lstm { inputs: i.usize()?, units: i.usize()? },
            k => return Err(fmt(format!("layer kind {k}"))),
        };
        let n = i.u8()? as usize;
        let names = spec.param_names();
        if n != names.len() {
            return Err(fmt(format!("{n} parameter blobs for a layer with {}", names.len())));
        }
        let mut params = Vec::with_capacity(n);
        for want in names {
            let name = i.name()?;
            if name != *want {
                return Err(fmt(format!("expected parameter `{want}`, found `{name}`")));
            }
            let dims = i.dims()?;
            let data = i.f64s(dims.iter().product())?;
            params.push(Tensor::from_vec(&dims, data)?);
        }
        parts.push((spec, params));
    }
    let mut extras = Extras::new();
    for _ in 0..i.u32()? {
        let name = i.name()?;
        let len = i.usize()?;
        extras.insert(name, i.f64s(len)?);
    }
    let mut tail = [0u8; 1];
    if i.0.read(&mut tail)? != 0 {
        return Err(fmt("trailing bytes"));
    }
    Ok((Network::from_parts(&input_shape, parts, seed)?, extras))
}

pub fn write_model_file(path: impl AsRef<Path>, net: &Network, extras: &Extras) -> Result<(), NnError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, net, extras)?;
    w.flush()?;
    Ok(())
}

pub fn read_model_file(path: impl AsRef<Path>) -> Result<(Network, Extras), NnError> {
    read_model(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Network {
        Network::new(
            &[6, 2],
            &[
                LayerSpec::Conv1d {
                    in_channels: 2,
                    filters: 4,
                    extent: 3,
                    stride: 1,
                    padding: 1,
                    activation: Activation::Relu,
                },
                LayerSpec::MaxPool1d { extent: 2, stride: 2 },
                LayerSpec::Lstm { inputs: 4, units: 5 },
                LayerSpec::Dense { inputs: 5, outputs: 1, activation: Activation::Linear },
            ],
            77,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = sample();
        let mut extras = Extras::new();
        extras.insert("x_mean".into(), vec![0.1, f64::MIN_POSITIVE, -3.5e200]);
        let mut buf = Vec::new();
        write_model(&mut buf, &net, &extras).unwrap();
        let (back, ex) = read_model(buf.as_slice()).unwrap();
        assert_eq!(back, net);
        assert_eq!(ex, extras);
        let mut again = Vec::new();
        write_model(&mut again, &back, &ex).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_corruption() {
        let mut buf = Vec::new();
        write_model(&mut buf, &sample(), &Extras::new()).unwrap();
        assert!(read_model(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_model(bad.as_slice()), Err(NnError::Format(_))));
        let mut long = buf;
        long.push(0);
        assert!(read_model(long.as_slice()).is_err());
    }
}
