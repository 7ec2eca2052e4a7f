//! Versioned JSON persistence for trained ensembles.
//!
//! A checkpoint is a plain JSON document with a fixed field order —
//! `format_version` first, then the regularizer config, then the member
//! parameter arrays — so files diff cleanly and version checks never
//! depend on parsing the rest of the document. Every `f64` is written in
//! shortest round-trip decimal form and parsed back bit-exactly, which
//! makes `save -> load -> predict` reproduce the original predictions to
//! the last bit.

use crate::diversity::AdpConfig;
use crate::error::{Error, Result};
use crate::model::{Ensemble, Layer, MlpConfig, ModelParams};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// The only checkpoint format this build reads or writes.
pub const FORMAT_VERSION: u32 = 1;

/// One affine layer's parameters, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointLayer {
    /// Weight rows (fan-in).
    pub rows: usize,
    /// Weight columns (fan-out).
    pub cols: usize,
    /// `rows * cols` weight entries, row-major.
    pub weight: Vec<f64>,
    /// `cols` bias entries.
    pub bias: Vec<f64>,
}

/// One member's layers, input to output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMember {
    /// Affine layers, input to output.
    pub layers: Vec<CheckpointLayer>,
}

/// A complete serialized ensemble. Field order is part of the format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Format tag; files with any other value are rejected unread.
    pub format_version: u32,
    /// Regularizer coefficients the ensemble was trained with.
    pub adp: AdpConfig,
    /// Member architecture.
    pub mlp: MlpConfig,
    /// Master seed of the training run.
    pub seed: u64,
    /// SHA-256 hex digest of the training report JSON (empty if untrained).
    pub report_digest: String,
    /// Per-member parameters.
    pub members: Vec<CheckpointMember>,
}

impl Checkpoint {
    /// Captures an ensemble's parameters with its training provenance.
    pub fn from_ensemble(
        ens: &Ensemble,
        adp: AdpConfig,
        seed: u64,
        report_digest: impl Into<String>,
    ) -> Checkpoint {
        let members = ens
            .members()
            .iter()
            .map(|m| CheckpointMember {
                layers: m
                    .layers
                    .iter()
                    .map(|l| CheckpointLayer {
                        rows: l.weight.rows(),
                        cols: l.weight.cols(),
                        weight: l.weight.data().to_vec(),
                        bias: l.bias.data().to_vec(),
                    })
                    .collect(),
            })
            .collect();
        Checkpoint {
            format_version: FORMAT_VERSION,
            adp,
            mlp: ens.config().clone(),
            seed,
            report_digest: report_digest.into(),
            members,
        }
    }

    /// Validates version, configs, and every array shape.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        self.mlp.validate()?;
        self.adp.validated()?;
        if self.members.is_empty() {
            return Err(Error::Empty("checkpoint members"));
        }
        let dims = self.mlp.layer_dims();
        for (m, member) in self.members.iter().enumerate() {
            if member.layers.len() != dims.len() {
                return Err(Error::CheckpointShape {
                    member: m,
                    layer: 0,
                    detail: format!(
                        "{} layers stored, architecture has {}",
                        member.layers.len(),
                        dims.len()
                    ),
                });
            }
            for (l, (layer, &(fan_in, fan_out))) in
                member.layers.iter().zip(&dims).enumerate()
            {
                if layer.rows != fan_in || layer.cols != fan_out {
                    return Err(Error::CheckpointShape {
                        member: m,
                        layer: l,
                        detail: format!(
                            "declared {}x{}, architecture wants {}x{}",
                            layer.rows, layer.cols, fan_in, fan_out
                        ),
                    });
                }
                if layer.weight.len() != fan_in * fan_out {
                    return Err(Error::CheckpointShape {
                        member: m,
                        layer: l,
                        detail: format!(
                            "weight array has {} entries, expected {}",
                            layer.weight.len(),
                            fan_in * fan_out
                        ),
                    });
                }
                if layer.bias.len() != fan_out {
                    return Err(Error::CheckpointShape {
                        member: m,
                        layer: l,
                        detail: format!(
                            "bias array has {} entries, expected {fan_out}",
                            layer.bias.len()
                        ),
                    });
                }
                for &v in layer.weight.iter().chain(&layer.bias) {
                    if !v.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite parameter {v} in member {m} layer {l}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Rebuilds the ensemble. Predictions of the result are bit-identical
    /// to the ensemble the checkpoint was taken from.
    pub fn to_ensemble(&self) -> Result<Ensemble> {
        self.validate()?;
        let members = self
            .members
            .iter()
            .map(|member| ModelParams {
                layers: member
                    .layers
                    .iter()
                    .map(|l| Layer {
                        weight: Tensor::new(l.rows, l.cols, l.weight.clone())
                            .expect("validated above"),
                        bias: Tensor::new(1, l.cols, l.bias.clone()).expect("validated above"),
                    })
                    .collect(),
            })
            .collect();
        Ensemble::from_members(self.mlp.clone(), members)
    }

    /// The exact bytes [`save_checkpoint`] writes.
    pub fn to_json_string(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Writes `ckpt` as pretty-printed JSON. Byte-deterministic: the same
/// checkpoint always produces the same file.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.validate()?;
    std::fs::write(path, ckpt.to_json_string()?)?;
    Ok(())
}

/// Reads and fully validates a checkpoint. The version field is checked
/// before anything else so future formats fail cleanly.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::FormatVersion {
                found: v as u32,
                expected: FORMAT_VERSION,
            })
        }
        None => {
            return Err(Error::FormatVersion {
                found: 0,
                expected: FORMAT_VERSION,
            })
        }
    }
    let ckpt: Checkpoint = serde_json::from_value(value)?;
    ckpt.validate()?;
    Ok(ckpt)
}

/// SHA-256 hex digest used to tie a checkpoint to its training report.
pub fn report_digest(report_json: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(report_json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::model::MlpConfig;

    fn sample_ensemble() -> Ensemble {
        let cfg = MlpConfig::with_hidden(6, vec![8], 3).unwrap();
        Ensemble::init(cfg, 2, 21).unwrap()
    }

    #[test]
    fn round_trip_preserves_predictions_bit_exactly() {
        let ens = sample_ensemble();
        let ckpt = Checkpoint::from_ensemble(&ens, AdpConfig::baseline(), 21, "");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ckpt);
        let rebuilt = loaded.to_ensemble().unwrap();
        let ds = synth_blobs(3, 3, 6, 15, 0.08).unwrap();
        let a = ens.predict_ensemble(ds.features()).unwrap();
        let b = rebuilt.predict_ensemble(ds.features()).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn saving_twice_produces_identical_bytes() {
        let ens = sample_ensemble();
        let ckpt = Checkpoint::from_ensemble(&ens, AdpConfig::new(2.0, 0.5).unwrap(), 4, "ab");
        assert_eq!(
            ckpt.to_json_string().unwrap(),
            ckpt.to_json_string().unwrap()
        );
    }

    #[test]
    fn field_order_is_part_of_the_format() {
        let ens = sample_ensemble();
        let ckpt = Checkpoint::from_ensemble(&ens, AdpConfig::baseline(), 1, "");
        let json = ckpt.to_json_string().unwrap();
        let pos = |needle: &str| json.find(needle).unwrap();
        assert!(pos("\"format_version\"") < pos("\"adp\""));
        assert!(pos("\"adp\"") < pos("\"members\""));
    }

    #[test]
    fn version_bump_is_rejected_with_exit_code_3() {
        let ens = sample_ensemble();
        let ckpt = Checkpoint::from_ensemble(&ens, AdpConfig::baseline(), 1, "");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let bumped = ckpt.to_json_string().unwrap().replacen(
            "\"format_version\": 1",
            "\"format_version\": 2",
            1,
        );
        std::fs::write(&path, bumped).unwrap();
        match load_checkpoint(&path) {
            Err(e @ Error::FormatVersion {
                found: 2,
                expected: 1,
            }) => assert_eq!(e.exit_code(), 3),
            other => panic!("expected FormatVersion, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_array_length_names_member_and_layer() {
        let ens = sample_ensemble();
        let mut ckpt = Checkpoint::from_ensemble(&ens, AdpConfig::baseline(), 1, "");
        ckpt.members[1].layers[0].weight.pop();
        match ckpt.validate() {
            Err(Error::CheckpointShape { member, layer, .. }) => {
                assert_eq!(member, 1);
                assert_eq!(layer, 0);
            }
            other => panic!("expected CheckpointShape, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_layer_dims_are_rejected() {
        let ens = sample_ensemble();
        let mut ckpt = Checkpoint::from_ensemble(&ens, AdpConfig::baseline(), 1, "");
        ckpt.members[0].layers[1].cols = 4;
        assert!(matches!(
            ckpt.validate(),
            Err(Error::CheckpointShape {
                member: 0,
                layer: 1,
                ..
            })
        ));
    }

    #[test]
    fn digest_is_stable_and_hex() {
        let d = report_digest("{\"epochs\":[]}");
        assert_eq!(d.len(), 64);
        assert!(d.chars().all(|c| c.is_ascii_hexdigit()));
        assert_eq!(d, report_digest("{\"epochs\":[]}"));
        assert_ne!(d, report_digest("{\"epochs\":[1]}"));
    }

    #[test]
    fn missing_version_field_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        std::fs::write(&path, "{\"adp\": {\"alpha\": 0.0}}").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::FormatVersion { found: 0, .. })
        ));
    }
}
