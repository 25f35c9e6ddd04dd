//! Binary parameter files.
//!
//! Layout, all integers `u32` little-endian:
//! `version, count`, then per parameter
//! `name_len, name (UTF-8), ndim, dims..., values (f32 LE)`.

use super::{NnError, ParameterSet, Result, Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn write_checkpoint<T: Scalar>(params: &ParameterSet<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + params.num_values() * 4);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(NnError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let mut r = Reader { bytes, pos: 0 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| NnError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| NnError::Checkpoint("shape overflow".into()))?)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push(CheckpointEntry { name, shape, values });
    }
    if r.pos != bytes.len() {
        return Err(NnError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

impl<T: Scalar> ParameterSet<T> {
    /// Overwrites values from a checkpoint. Names and shapes must match this
    /// set exactly; trainable flags are kept.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<()> {
        let entries = read_checkpoint(bytes)?;
        if entries.len() != self.len() {
            return Err(NnError::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                entries.len(),
                self.len()
            )));
        }
        for e in entries {
            let p = self
                .get_mut(&e.name)
                .map_err(|_| NnError::Checkpoint(format!("unexpected parameter {:?}", e.name)))?;
            if p.value.shape() != e.shape.as_slice() {
                return Err(NnError::Checkpoint(format!(
                    "parameter {:?} has shape {:?}, checkpoint {:?}",
                    e.name,
                    p.value.shape(),
                    e.shape
                )));
            }
            p.value = Tensor::new(e.shape, e.values.iter().map(|&v| T::lit(v as f64)).collect())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterSet<f32> {
        let mut ps = ParameterSet::new();
        ps.insert("enc.w", Tensor::new(vec![2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0, 1e-30, -7.25]).unwrap(), true)
            .unwrap();
        ps.insert("stats", Tensor::new(vec![1], vec![42.0]).unwrap(), false).unwrap();
        ps
    }

    #[test]
    fn bit_exact_round_trip() {
        let ps = sample();
        let bytes = write_checkpoint(&ps);
        let mut other = sample();
        other.get_mut("enc.w").unwrap().value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        other.load_checkpoint(&bytes).unwrap();
        assert_eq!(write_checkpoint(&other), bytes);
        let a = ps.get("enc.w").unwrap().value.data();
        let b = other.get("enc.w").unwrap().value.data();
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn header_layout() {
        let bytes = write_checkpoint(&sample());
        assert_eq!(&bytes[..8], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[5, 0, 0, 0]);
        assert_eq!(&bytes[12..17], b"enc.w");
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = write_checkpoint(&sample());
        assert!(read_checkpoint(&bytes[..bytes.len() - 2]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra).is_err());
        let mut bad_version = bytes.clone();
        bad_version[0] = 9;
        assert!(read_checkpoint(&bad_version).is_err());

        let mut wrong = ParameterSet::<f32>::new();
        wrong.insert_const("enc.w", &[3, 2], 0.0, true).unwrap();
        wrong.insert_const("stats", &[1], 0.0, false).unwrap();
        assert!(wrong.load_checkpoint(&bytes).is_err());
    }
}
