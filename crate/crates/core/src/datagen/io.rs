//! `DS1` dataset files: a fixed header followed by checksummed records.
//!
//! ```text
//! "DS1" | u32 T | u32 H | u32 W | u32 K | u64 count
//! count × ( u64 payload_len | payload | u32 crc32(payload) )
//! ```
//!
//! Each payload is a run of named arrays: `frames` and `flows` as f32, the
//! rest as f64, and `meta` as u64 `[id, seed]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flowpose_tensor::Tensor;

use super::FrameSequence;
use crate::body_model::NUM_BETAS;
use crate::container::{self, ArraySet, FormatError, NamedArray};
use crate::error::{Error, Result};

const MAGIC: &str = "DS1";
const RECORD_ARRAYS: usize = 9;

fn dims(s: &FrameSequence) -> [usize; 4] {
    [s.len(), s.height(), s.width(), s.num_joints()]
}

fn encode(s: &FrameSequence) -> Vec<u8> {
    let arrays = [
        NamedArray::f32("frames", &s.frames),
        NamedArray::f32("flows", &s.flows),
        NamedArray::f64("pose", &s.pose),
        NamedArray::f64("shape", &Tensor::from_vec(&[NUM_BETAS], s.shape.to_vec())),
        NamedArray::f64("camera", &s.cameras),
        NamedArray::f64("joints3d", &s.joints3d),
        NamedArray::f64("joints2d", &s.joints2d),
        NamedArray::f64("fps", &Tensor::scalar(s.fps)),
        NamedArray::u64("meta", &[s.id, s.seed]),
    ];
    let mut buf = Vec::new();
    for a in &arrays {
        container::write_array(&mut buf, a).expect("writing to a Vec cannot fail");
    }
    buf
}

fn decode(payload: &[u8], [t, h, w, k]: [usize; 4]) -> std::result::Result<FrameSequence, FormatError> {
    let mut r = payload;
    let mut arrays = Vec::with_capacity(RECORD_ARRAYS);
    while !r.is_empty() {
        arrays.push(container::read_array(&mut r)?);
    }
    let set = ArraySet(arrays);
    let meta = set.get("meta")?.as_u64()?;
    if meta.len() != 2 {
        return Err(FormatError::Malformed("meta must hold [id, seed]".into()));
    }
    let shape = set.tensor("shape", Some(&[NUM_BETAS]))?;
    Ok(FrameSequence {
        frames: set.tensor("frames", Some(&[t, h, w, 3]))?,
        flows: set.tensor("flows", Some(&[t, h, w, 2]))?,
        pose: set.tensor("pose", Some(&[t, k, 3]))?,
        shape: shape.data().try_into().unwrap(),
        cameras: set.tensor("camera", Some(&[t, 3]))?,
        joints3d: set.tensor("joints3d", Some(&[t, k, 3]))?,
        joints2d: set.tensor("joints2d", Some(&[t, k, 2]))?,
        fps: set.tensor("fps", Some(&[]))?.item(),
        id: meta[0],
        seed: meta[1],
    })
}

pub fn write_dataset_to(w: &mut impl Write, sequences: &[FrameSequence]) -> Result<()> {
    let d = sequences.first().map(dims).unwrap_or([0; 4]);
    for s in sequences {
        if dims(s) != d {
            return Err(Error::shape("write_dataset", &d, &dims(s)));
        }
    }
    container::write_magic(w, MAGIC)?;
    for v in d {
        container::write_u32(w, v as u32)?;
    }
    container::write_u64(w, sequences.len() as u64)?;
    for s in sequences {
        let payload = encode(s);
        container::write_u64(w, payload.len() as u64)?;
        w.write_all(&payload)?;
        container::write_u32(w, crc32fast::hash(&payload))?;
    }
    Ok(())
}

pub fn read_dataset_from(r: &mut impl Read) -> Result<Vec<FrameSequence>> {
    container::read_magic(r, MAGIC)?;
    let mut d = [0usize; 4];
    for v in d.iter_mut() {
        *v = container::read_u32(r)? as usize;
    }
    let count = container::read_u64(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for record in 0..count {
        let len = container::read_u64(r)? as usize;
        let mut payload = Vec::new();
        r.take(len as u64).read_to_end(&mut payload)?;
        if payload.len() != len {
            return Err(FormatError::Truncated.into());
        }
        let stored = container::read_u32(r)?;
        let computed = crc32fast::hash(&payload);
        if stored != computed {
            return Err(FormatError::Checksum { record, stored, computed }.into());
        }
        out.push(decode(&payload, d)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(FormatError::Malformed("trailing bytes after the last record".into()).into());
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, sequences: &[FrameSequence]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(&mut w, sequences)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<FrameSequence>> {
    read_dataset_from(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::BodyTemplate;
    use crate::datagen::{generate, GenConfig};

    fn tiny() -> GenConfig {
        GenConfig {
            seq_len: 3,
            height: 16,
            width: 16,
            ..GenConfig::default()
        }
    }

    #[test]
    fn empty_dataset_round_trips() {
        let mut buf = Vec::new();
        write_dataset_to(&mut buf, &[]).unwrap();
        assert_eq!(buf.len(), 3 + 16 + 8);
        assert!(read_dataset_from(&mut &buf[..]).unwrap().is_empty());
    }

    #[test]
    fn records_round_trip_bit_for_bit() {
        let tpl = BodyTemplate::toy();
        let seqs = generate(&tpl, &tiny(), &[1, 2]).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&mut buf, &seqs).unwrap();
        let back = read_dataset_from(&mut &buf[..]).unwrap();
        assert_eq!(back, seqs);
        let mut again = Vec::new();
        write_dataset_to(&mut again, &back).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn corruption_truncation_and_version_are_reported() {
        let tpl = BodyTemplate::toy();
        let seqs = generate(&tpl, &tiny(), &[5]).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&mut buf, &seqs).unwrap();

        let mut bad = buf.clone();
        bad[60] ^= 0x10;
        let err = read_dataset_from(&mut &bad[..]).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::Checksum { record: 0, .. })), "{err}");

        let cut = &buf[..buf.len() - 10];
        assert!(matches!(read_dataset_from(&mut &cut[..]), Err(Error::Format(FormatError::Truncated))));

        let mut v2 = buf.clone();
        v2[2] = b'2';
        assert!(matches!(
            read_dataset_from(&mut &v2[..]),
            Err(Error::Format(FormatError::VersionMismatch { .. }))
        ));
    }

    #[test]
    fn mixed_dimensions_are_rejected() {
        let tpl = BodyTemplate::toy();
        let a = generate(&tpl, &tiny(), &[1]).unwrap();
        let b = generate(&tpl, &GenConfig { seq_len: 4, ..tiny() }, &[1]).unwrap();
        let mut buf = Vec::new();
        assert!(write_dataset_to(&mut buf, &[a[0].clone(), b[0].clone()]).is_err());
    }
}
