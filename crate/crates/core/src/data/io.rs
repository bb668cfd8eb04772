//! Dataset file format.
//!
//! ```text
//! ANYSEG-DATA v1\n
//! <manifest JSON>\n
//! u64 FNV-1a digest of the manifest line
//! per sample: u64 seed, h*w label bytes, per modality h*w*3 f32 values,
//!             u64 FNV-1a digest of the sample record
//! ```
//! Integers and floats are little-endian. Reads validate everything before
//! returning, so a damaged file never yields a partial dataset.

use std::fs;
use std::path::Path;

use super::{Dataset, DatasetManifest, SceneSample};
use crate::autodiff::Tensor;
use crate::error::{AnysegError, Result};
use crate::segmentor::digest;

pub const DATASET_MAGIC: &str = "ANYSEG-DATA v1";

fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    let m = &ds.manifest;
    if m.sample_count != ds.samples.len() {
        return Err(AnysegError::Invariant(format!(
            "manifest lists {} samples, dataset holds {}",
            m.sample_count,
            ds.samples.len()
        )));
    }
    let manifest = serde_json::to_string(m).map_err(|e| AnysegError::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(manifest.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&digest(manifest.as_bytes()).to_le_bytes());
    let mut record = Vec::new();
    for s in &ds.samples {
        record.clear();
        record.extend_from_slice(&s.seed.to_le_bytes());
        record.extend_from_slice(&s.labels);
        for &m in &m.modalities {
            let img = s.image(m).ok_or(AnysegError::MissingModality(m))?;
            for &v in img.data() {
                record.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&record);
        out.extend_from_slice(&digest(&record).to_le_bytes());
    }
    Ok(out)
}

/// Writes atomically through a sibling temporary file.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode(ds)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| AnysegError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| AnysegError::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| AnysegError::io(path, e))?;
    parse_dataset(&bytes)
}

fn truncated() -> AnysegError {
    AnysegError::Format("dataset truncated".into())
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(truncated)?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn take_u64(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, pos, 8)?.try_into().expect("8 bytes")))
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    let len = bytes[*pos..].iter().position(|&b| b == b'\n').ok_or_else(truncated)?;
    let line = &bytes[*pos..*pos + len];
    *pos += len + 1;
    Ok(line)
}

pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut pos = 0;
    if take_line(bytes, &mut pos).ok() != Some(DATASET_MAGIC.as_bytes()) {
        return Err(AnysegError::Format(format!("missing `{DATASET_MAGIC}` header")));
    }
    let manifest_raw = take_line(bytes, &mut pos)?;
    let stored = take_u64(bytes, &mut pos)?;
    let computed = digest(manifest_raw);
    if stored != computed {
        return Err(AnysegError::Checksum {
            what: "dataset manifest".into(),
            stored,
            computed,
        });
    }
    let manifest: DatasetManifest =
        serde_json::from_slice(manifest_raw).map_err(|e| AnysegError::Format(format!("manifest: {e}")))?;
    let config = manifest.scene_config();
    config.validate()?;

    let (h, w, k) = (manifest.height, manifest.width, manifest.num_classes);
    let pixels = h * w;
    let record_len = 8 + pixels + manifest.modalities.len() * pixels * 3 * 4;
    let expected_len = pos + manifest.sample_count.saturating_mul(record_len + 8);
    if bytes.len() < expected_len {
        return Err(truncated());
    }
    if bytes.len() > expected_len {
        return Err(AnysegError::Format("trailing bytes after last sample".into()));
    }

    let mut seen = vec![false; k];
    let mut samples = Vec::with_capacity(manifest.sample_count);
    for i in 0..manifest.sample_count {
        let record = take(bytes, &mut pos, record_len)?;
        let stored = take_u64(bytes, &mut pos)?;
        let computed = digest(record);
        if stored != computed {
            return Err(AnysegError::Checksum {
                what: format!("sample {i}"),
                stored,
                computed,
            });
        }
        let seed = u64::from_le_bytes(record[..8].try_into().expect("8 bytes"));
        let labels = record[8..8 + pixels].to_vec();
        for (p, &l) in labels.iter().enumerate() {
            if l as usize >= k {
                return Err(AnysegError::LabelOutOfRange {
                    position: i * pixels + p,
                    label: l as usize,
                    classes: k,
                });
            }
            seen[l as usize] = true;
        }
        let mut images = Vec::with_capacity(manifest.modalities.len());
        for (j, &m) in manifest.modalities.iter().enumerate() {
            let start = 8 + pixels + j * pixels * 12;
            let data = record[start..start + pixels * 12]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            images.push((m, Tensor::new(&[h, w, 3], data)?));
        }
        samples.push(SceneSample {
            seed,
            height: h,
            width: w,
            labels,
            images,
        });
    }
    if manifest.sample_count > 0 {
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(AnysegError::Format(format!(
                "manifest declares {k} classes but class {missing} never occurs"
            )));
        }
    }
    Ok(Dataset { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SceneConfig};

    fn small() -> Dataset {
        generate_dataset(&SceneConfig::default(), 3, 11).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = small();
        let bytes = encode(&ds).unwrap();
        assert_eq!(parse_dataset(&bytes).unwrap(), ds);
    }

    #[test]
    fn truncation_and_tampering_rejected() {
        let bytes = encode(&small()).unwrap();
        for cut in [10, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(parse_dataset(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 20;
        flipped[last] ^= 1;
        assert!(matches!(parse_dataset(&flipped), Err(AnysegError::Checksum { .. })));
    }

    #[test]
    fn edited_class_count_rejected() {
        let bytes = encode(&small()).unwrap();
        let needle = b"\"num_classes\":4";
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        let mut raw = bytes.clone();
        raw[at + needle.len() - 1] = b'5';
        assert!(matches!(parse_dataset(&raw), Err(AnysegError::Checksum { .. })));

        // a consistently re-digested manifest still fails class validation
        for k in [3, 5] {
            let mut ds = small();
            ds.manifest.num_classes = k;
            assert!(parse_dataset(&encode(&ds).unwrap()).is_err(), "k = {k}");
        }
    }
}
