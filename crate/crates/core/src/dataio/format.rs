//! EEGDS v1: a directory holding `manifest.json` and one headerless
//! little-endian f32 file per trial (row-major `C × T`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, DatasetInfo, Result, Trial};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub file: String,
    pub label: usize,
    pub subject_id: u32,
    pub session_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    #[serde(rename = "C")]
    pub num_channels: usize,
    #[serde(rename = "K_cls")]
    pub num_classes: usize,
    pub sample_rate_hz: f64,
    #[serde(rename = "T")]
    pub num_samples: usize,
    pub channel_names: Vec<String>,
    pub trials: Vec<TrialRecord>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let info = &dataset.info;
    let mut records = Vec::with_capacity(dataset.len());
    for (i, t) in dataset.trials.iter().enumerate() {
        let file = format!("trial_{i:05}.f32");
        let mut bytes = Vec::with_capacity(t.data.len() * 4);
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        records.push(TrialRecord {
            file,
            label: t.label,
            subject_id: t.subject_id,
            session_id: t.session_id,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        num_channels: info.num_channels,
        num_classes: info.num_classes,
        sample_rate_hz: info.sample_rate_hz,
        num_samples: info.num_samples,
        channel_names: info.channel_names.clone(),
        trials: records,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    // peek at the version before committing to the v1 schema
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| DataError::CorruptManifest(e.to_string()))?;
    match raw.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => return Err(DataError::UnsupportedVersion(v as u32)),
        None => return Err(DataError::CorruptManifest("missing version".into())),
    }
    let m: Manifest = serde_json::from_value(raw).map_err(|e| DataError::CorruptManifest(e.to_string()))?;
    if m.channel_names.len() != m.num_channels {
        return Err(DataError::CorruptManifest(format!(
            "{} channel names for C={}",
            m.channel_names.len(),
            m.num_channels
        )));
    }
    if m.num_classes == 0 || m.num_samples == 0 || !(m.sample_rate_hz > 0.0) {
        return Err(DataError::CorruptManifest(
            "K_cls, T and sample_rate_hz must be positive".into(),
        ));
    }
    let expected = m.num_channels * m.num_samples * 4;
    let mut trials = Vec::with_capacity(m.trials.len());
    for rec in &m.trials {
        let p = dir.join(&rec.file);
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        if bytes.len() != expected {
            return Err(DataError::ShapeMismatch {
                file: rec.file.clone(),
                expected_rows: m.num_channels,
                expected_cols: m.num_samples,
                expected_bytes: expected,
                actual_bytes: bytes.len(),
                actual_rows: bytes.len() / (4 * m.num_samples),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        trials.push(Trial {
            data,
            n_channels: m.num_channels,
            n_samples: m.num_samples,
            label: rec.label,
            subject_id: rec.subject_id,
            session_id: rec.session_id,
            sample_rate_hz: m.sample_rate_hz,
        });
    }
    let ds = Dataset::new(
        DatasetInfo {
            num_channels: m.num_channels,
            num_classes: m.num_classes,
            sample_rate_hz: m.sample_rate_hz,
            num_samples: m.num_samples,
            channel_names: m.channel_names,
        },
        trials,
    );
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_generate, SynthConfig};

    fn tiny() -> Dataset {
        synth_generate(&SynthConfig {
            n_subjects: 2,
            n_sessions: 2,
            trials_per_class: 1,
            n_samples: 250,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.trials.iter().zip(&ds.trials) {
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn short_payload_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        save_dataset(&ds, dir.path()).unwrap();
        // drop the last channel row of the first trial: 22 rows instead of 23
        let f = dir.path().join("trial_00000.f32");
        let bytes = std::fs::read(&f).unwrap();
        std::fs::write(&f, &bytes[..22 * 250 * 4]).unwrap();
        match load_dataset(dir.path()) {
            Err(DataError::ShapeMismatch {
                expected_rows,
                actual_rows,
                ..
            }) => {
                assert_eq!(expected_rows, 23);
                assert_eq!(actual_rows, 22);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn empty_dataset_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny().empty_like();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.info, ds.info);
    }

    #[test]
    fn version_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny().empty_like(), dir.path()).unwrap();
        let p = dir.path().join(MANIFEST);
        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, text.replace("\"version\": 1", "\"version\": 2")).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::UnsupportedVersion(2))
        ));
        std::fs::write(&p, "{not json").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::CorruptManifest(_))));
    }
}
