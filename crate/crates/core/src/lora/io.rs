use std::path::Path;

use serde::{Deserialize, Serialize};

use super::merge::{MergeStrategy, MergedDelta, MergedSite};
use super::{ConceptDelta, HyperRecord, SiteFactors};
use crate::encoder::{FrozenEncoder, Site, SiteAddress};
use crate::error::{PolarError, Result};
use crate::linalg::Matrix;

pub const DELTA_FORMAT_VERSION: u32 = 1;

const KIND_DELTA: &str = "concept_delta";
const KIND_MERGED: &str = "merged_delta";

#[derive(Serialize, Deserialize)]
struct SiteRecord {
    layer: usize,
    site: Site,
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    a: Option<Vec<Vec<f32>>>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    b: Option<Vec<Vec<f32>>>,
    #[serde(rename = "DW", default, skip_serializing_if = "Option::is_none")]
    dw: Option<Vec<Vec<f32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    blocks: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct DeltaFile {
    format_version: u32,
    kind: String,
    concept_id: String,
    encoder_fingerprint: String,
    rank: usize,
    sites: Vec<SiteRecord>,
    hyper: HyperRecord,
}

#[derive(Serialize, Deserialize)]
struct MergedFile {
    format_version: u32,
    kind: String,
    strategy: MergeStrategy,
    /// Documents how `max` combines entries.
    max_semantics: String,
    sources: Vec<String>,
    encoder_fingerprint: String,
    sites: Vec<SiteRecord>,
}

fn nested(m: &Matrix) -> Vec<Vec<f32>> {
    m.to_rows()
}

fn matrix(rows: &[Vec<f32>], cols_hint: usize, what: &str) -> Result<Matrix> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, cols_hint));
    }
    Matrix::from_rows(rows).map_err(|e| PolarError::shape(format!("{what}: {e}")))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> PolarError {
    PolarError::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn check_version(path: &Path, version: u32, kind: &str, want_kind: &str) -> Result<()> {
    if version != DELTA_FORMAT_VERSION {
        return Err(PolarError::Version {
            expected: DELTA_FORMAT_VERSION,
            found: version,
        });
    }
    if kind != want_kind {
        return Err(corrupt(path, format!("expected kind '{want_kind}', found '{kind}'")));
    }
    Ok(())
}

fn check_encoder(fingerprint: &str, enc: Option<&FrozenEncoder>) -> Result<()> {
    if let Some(enc) = enc {
        if enc.fingerprint() != fingerprint {
            return Err(PolarError::Fingerprint {
                expected: enc.fingerprint().to_string(),
                found: fingerprint.to_string(),
            });
        }
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| PolarError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| PolarError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| corrupt(path, e.to_string()))
}

pub fn save_delta(delta: &ConceptDelta, path: impl AsRef<Path>) -> Result<()> {
    let file = DeltaFile {
        format_version: DELTA_FORMAT_VERSION,
        kind: KIND_DELTA.into(),
        concept_id: delta.concept_id.clone(),
        encoder_fingerprint: delta.encoder_fingerprint.clone(),
        rank: delta.rank,
        sites: delta
            .sites
            .iter()
            .map(|s| SiteRecord {
                layer: s.address.layer,
                site: s.address.site,
                a: Some(nested(&s.a)),
                b: Some(nested(&s.b)),
                dw: None,
                blocks: None,
            })
            .collect(),
        hyper: delta.hyper.clone(),
    };
    write_json(path.as_ref(), &file)
}

/// Reads a delta file; with `enc`, also checks it was trained against that
/// encoder.
pub fn load_delta(path: impl AsRef<Path>, enc: Option<&FrozenEncoder>) -> Result<ConceptDelta> {
    let path = path.as_ref();
    let file: DeltaFile = read_json(path)?;
    check_version(path, file.format_version, &file.kind, KIND_DELTA)?;
    let mut sites = Vec::with_capacity(file.sites.len());
    for rec in &file.sites {
        let (Some(a), Some(b)) = (&rec.a, &rec.b) else {
            return Err(corrupt(path, "site record without A and B"));
        };
        sites.push(SiteFactors {
            address: SiteAddress::new(rec.layer, rec.site),
            a: matrix(a, 0, "A")?,
            b: matrix(b, file.rank, "B")?,
        });
    }
    let delta = ConceptDelta::new(file.concept_id, file.encoder_fingerprint, file.rank, sites, file.hyper)
        .map_err(|e| corrupt(path, e.to_string()))?;
    check_encoder(&delta.encoder_fingerprint, enc)?;
    if let Some(enc) = enc {
        enc.check_updates(&[&delta])?;
    }
    Ok(delta)
}

pub fn save_merged(merged: &MergedDelta, path: impl AsRef<Path>) -> Result<()> {
    let sites = merged
        .sites
        .iter()
        .map(|(addr, s)| match s {
            MergedSite::Stacked { a, b, blocks } => SiteRecord {
                layer: addr.layer,
                site: addr.site,
                a: Some(nested(a)),
                b: Some(nested(b)),
                dw: None,
                blocks: Some(blocks.clone()),
            },
            MergedSite::Dense(dw) => SiteRecord {
                layer: addr.layer,
                site: addr.site,
                a: None,
                b: None,
                dw: Some(nested(dw)),
                blocks: None,
            },
        })
        .collect();
    let file = MergedFile {
        format_version: DELTA_FORMAT_VERSION,
        kind: KIND_MERGED.into(),
        strategy: merged.strategy,
        max_semantics: "elementwise maximum of signed entries".into(),
        sources: merged.sources.clone(),
        encoder_fingerprint: merged.encoder_fingerprint.clone(),
        sites,
    };
    write_json(path.as_ref(), &file)
}

pub fn load_merged(path: impl AsRef<Path>, enc: Option<&FrozenEncoder>) -> Result<MergedDelta> {
    let path = path.as_ref();
    let file: MergedFile = read_json(path)?;
    check_version(path, file.format_version, &file.kind, KIND_MERGED)?;
    let mut sites = Vec::with_capacity(file.sites.len());
    for rec in &file.sites {
        let addr = SiteAddress::new(rec.layer, rec.site);
        let site = match (&rec.a, &rec.b, &rec.dw, &rec.blocks) {
            (Some(a), Some(b), None, Some(blocks)) => {
                let a = matrix(a, 0, "A")?;
                let b = matrix(b, a.rows(), "B")?;
                if blocks.iter().sum::<usize>() != a.rows() || a.rows() != b.cols() {
                    return Err(corrupt(path, format!("block ranks do not match factors at {addr}")));
                }
                MergedSite::Stacked {
                    a,
                    b,
                    blocks: blocks.clone(),
                }
            }
            (None, None, Some(dw), None) => MergedSite::Dense(matrix(dw, 0, "DW")?),
            _ => return Err(corrupt(path, format!("site {addr} is neither stacked nor dense"))),
        };
        sites.push((addr, site));
    }
    let merged = MergedDelta {
        sources: file.sources,
        encoder_fingerprint: file.encoder_fingerprint,
        strategy: file.strategy,
        sites,
    };
    check_encoder(&merged.encoder_fingerprint, enc)?;
    if let Some(enc) = enc {
        enc.check_updates(&[&merged])?;
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;
    use crate::lora::merge_max;

    fn sample() -> ConceptDelta {
        let mut rng = Rng::new(11);
        let addr = SiteAddress::new(4, Site::V);
        let a = Matrix::new(1, 8, rng.gaussian_vec(8, 1.0)).unwrap();
        let b = Matrix::new(8, 1, rng.gaussian_vec(8, 1e-3)).unwrap();
        let hyper = HyperRecord {
            lambda: 0.35,
            iterations: 500,
            learning_rate: 1e-3,
            seed: 9,
            constrain_a: true,
            ..HyperRecord::default()
        };
        ConceptDelta::new("cat7", "abc", 1, vec![SiteFactors { address: addr, a, b }], hyper).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        let d = sample();
        save_delta(&d, &path).unwrap();
        let back = load_delta(&path, None).unwrap();
        assert_eq!(back, d);
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.sites[0].b), bits(&d.sites[0].b));
    }

    #[test]
    fn truncated_and_versioned_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        save_delta(&sample(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_delta(&path, None), Err(PolarError::Corrupt { .. })));
        std::fs::write(&path, text.replace("\"format_version\": 1", "\"format_version\": 7")).unwrap();
        assert!(matches!(load_delta(&path, None), Err(PolarError::Version { found: 7, .. })));
        assert!(matches!(load_delta(dir.path().join("none.json"), None), Err(PolarError::Io { .. })));
    }

    #[test]
    fn merged_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = sample();
        let mut e = sample();
        e.concept_id = "dog2".into();
        let stacked = crate::lora::merge_add(&[&d, &e]).unwrap();
        let p = dir.path().join("m.json");
        save_merged(&stacked, &p).unwrap();
        assert_eq!(load_merged(&p, None).unwrap(), stacked);
        let dense = merge_max(&[&d, &e]).unwrap();
        save_merged(&dense, &p).unwrap();
        assert_eq!(load_merged(&p, None).unwrap(), dense);
        assert!(load_delta(&p, None).is_err());
    }
}
