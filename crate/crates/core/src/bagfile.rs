//! Little-endian binary container for bags.
//!
//! Header: magic `PTCB`, u16 version, u64 bag count, u32 feature width, u8
//! task tag. Each bag: u32 id length, id bytes, u32 instance count, label
//! (u8 tag, then u32 class or u32 bin + u8 censored), the features as f64
//! row-major, then u64 config hash and u64 seed.

use std::path::Path;

use crate::data::{BagRecord, DataError, Label, Provenance, TaskKind};
use crate::heads::SurvivalLabel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PTCB";
pub const VERSION: u16 = 1;

fn task_tag(t: TaskKind) -> u8 {
    match t {
        TaskKind::Classification => 0,
        TaskKind::Survival => 1,
    }
}

/// Serializes bags. All bags must share the feature width and task.
pub fn encode_bags(bags: &[BagRecord]) -> Result<Vec<u8>, DataError> {
    let (dim, task) = match bags.first() {
        Some(b) => (b.dim(), b.label.task()),
        None => (0, TaskKind::Classification),
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(bags.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.push(task_tag(task));
    for b in bags {
        if b.dim() != dim {
            return Err(DataError::InvalidBag {
                id: b.id.clone(),
                reason: format!("feature width {} differs from {dim}", b.dim()),
            });
        }
        if b.label.task() != task {
            return Err(DataError::InvalidBag {
                id: b.id.clone(),
                reason: format!("{} label in a {task} file", b.label.task()),
            });
        }
        out.extend_from_slice(&(b.id.len() as u32).to_le_bytes());
        out.extend_from_slice(b.id.as_bytes());
        out.extend_from_slice(&(b.n_instances() as u32).to_le_bytes());
        match b.label {
            Label::Class(c) => {
                out.push(0);
                out.extend_from_slice(&(c as u32).to_le_bytes());
            }
            Label::Survival(s) => {
                out.push(1);
                out.extend_from_slice(&(s.time_bin as u32).to_le_bytes());
                out.push(u8::from(s.censored));
            }
        }
        for x in b.features.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&b.provenance.config_hash.to_le_bytes());
        out.extend_from_slice(&b.provenance.seed.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    bag: Option<usize>,
}

impl<'a> Reader<'a> {
    fn what(&self, field: &str) -> String {
        match self.bag {
            Some(i) => format!("bag {i} {field}"),
            None => format!("header {field}"),
        }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8], DataError> {
        if self.buf.len() - self.pos < n {
            return Err(DataError::Truncated {
                offset: self.buf.len() as u64,
                what: self.what(field),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8, DataError> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn corrupt(&self, at: usize, field: &str, reason: impl Into<String>) -> DataError {
        DataError::Corrupt {
            offset: at as u64,
            what: self.what(field),
            reason: reason.into(),
        }
    }
}

pub fn decode_bags(buf: &[u8]) -> Result<Vec<BagRecord>, DataError> {
    let mut r = Reader { buf, pos: 0, bag: None };
    if r.take(4, "magic")? != MAGIC {
        return Err(DataError::BadMagic { offset: 0 });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(DataError::UnsupportedVersion { version, offset: 4 });
    }
    let count = r.u64("bag count")?;
    let dim = r.u32("feature width")? as usize;
    let at = r.pos;
    let task = match r.u8("task tag")? {
        0 => TaskKind::Classification,
        1 => TaskKind::Survival,
        t => return Err(r.corrupt(at, "task tag", format!("unknown tag {t}"))),
    };
    let mut bags = Vec::new();
    for i in 0..count as usize {
        r.bag = Some(i);
        let id_len = r.u32("id length")? as usize;
        let at = r.pos;
        let id = std::str::from_utf8(r.take(id_len, "id")?)
            .map_err(|e| r.corrupt(at, "id", e.to_string()))?
            .to_string();
        let at = r.pos;
        let n = r.u32("instance count")? as usize;
        if n == 0 {
            return Err(r.corrupt(at, "instance count", "bag has no instances"));
        }
        let at = r.pos;
        let label = match r.u8("label tag")? {
            0 => Label::Class(r.u32("class")? as usize),
            1 => {
                let time_bin = r.u32("time bin")? as usize;
                let at = r.pos;
                let censored = match r.u8("censor flag")? {
                    0 => false,
                    1 => true,
                    v => return Err(r.corrupt(at, "censor flag", format!("value {v}"))),
                };
                Label::Survival(SurvivalLabel { time_bin, censored })
            }
            t => return Err(r.corrupt(at, "label tag", format!("unknown tag {t}"))),
        };
        if label.task() != task {
            return Err(r.corrupt(at, "label tag", format!("{} label in a {task} file", label.task())));
        }
        let len = n
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(8))
            .ok_or_else(|| r.corrupt(r.pos, "features", "size overflow"))?;
        let at = r.pos;
        let raw = r.take(len, "features")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(k) = data.iter().position(|x| !x.is_finite()) {
            return Err(r.corrupt(at + 8 * k, "features", "non-finite value"));
        }
        let features = Tensor::matrix(n, dim, data).map_err(|e| r.corrupt(at, "features", e.to_string()))?;
        let config_hash = r.u64("config hash")?;
        let seed = r.u64("seed")?;
        bags.push(BagRecord {
            id,
            features,
            label,
            provenance: Provenance { config_hash, seed },
        });
    }
    if r.pos != buf.len() {
        r.bag = None;
        return Err(r.corrupt(
            r.pos,
            "trailer",
            format!("{} unexpected trailing bytes", buf.len() - r.pos),
        ));
    }
    Ok(bags)
}

pub fn write_bags(path: &Path, bags: &[BagRecord]) -> Result<(), DataError> {
    std::fs::write(path, encode_bags(bags)?)?;
    Ok(())
}

pub fn read_bags(path: &Path) -> Result<Vec<BagRecord>, DataError> {
    decode_bags(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_classification_bags, gen_survival_bags, SyntheticClassConfig, SyntheticSurvConfig};

    fn class_bags() -> Vec<BagRecord> {
        gen_classification_bags(&SyntheticClassConfig {
            bags_per_class: 3,
            min_instances: 2,
            max_instances: 5,
            dim: 4,
            components: 2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let bags = class_bags();
        assert_eq!(decode_bags(&encode_bags(&bags).unwrap()).unwrap(), bags);
        let surv = gen_survival_bags(&SyntheticSurvConfig {
            patients: 5,
            min_instances: 2,
            max_instances: 4,
            dim: 3,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(decode_bags(&encode_bags(&surv).unwrap()).unwrap(), surv);
    }

    #[test]
    fn empty_file_is_valid() {
        let bytes = encode_bags(&[]).unwrap();
        assert_eq!(bytes.len(), 19);
        assert!(decode_bags(&bytes).unwrap().is_empty());
    }

    #[test]
    fn truncation_reports_bag_index() {
        let bags = class_bags();
        let bytes = encode_bags(&bags).unwrap();
        let cut = encode_bags(&bags[..2]).unwrap().len() + 10;
        match decode_bags(&bytes[..cut]) {
            Err(DataError::Truncated { what, .. }) => assert!(what.starts_with("bag 2"), "{what}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_header() {
        let mut bytes = encode_bags(&class_bags()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_bags(&bytes), Err(DataError::BadMagic { offset: 0 })));
        let mut bytes = encode_bags(&class_bags()).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            decode_bags(&bytes),
            Err(DataError::UnsupportedVersion { version: 9, .. })
        ));
    }

    #[test]
    fn empty_bag_is_corrupt() {
        let mut bytes = encode_bags(&class_bags()[..1]).unwrap();
        let at = 19 + 4 + "bag-00000".len();
        bytes[at..at + 4].copy_from_slice(&0u32.to_le_bytes());
        match decode_bags(&bytes) {
            Err(DataError::Corrupt { offset, what, .. }) => {
                assert_eq!(offset, at as u64);
                assert_eq!(what, "bag 0 instance count");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mixed_widths_are_rejected() {
        let mut bags = class_bags();
        bags[1].features = Tensor::zeros(2, 5);
        assert!(matches!(encode_bags(&bags), Err(DataError::InvalidBag { .. })));
    }
}
