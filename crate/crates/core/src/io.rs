//! Artifact container and flat binary data export.
//!
//! One self-describing JSON container carries everything a stage produces:
//! the architecture descriptor, named parameters (float or int8), source
//! statistics and the purity report once computed. Adaptation runs need
//! exactly this one file plus the stream. JSON float round-tripping is
//! exact (shortest-representation printing), so save/load preserves
//! parameters bitwise.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::drls::PurityReport;
use crate::error::{Error, Result};
use crate::models::{Architecture, ModelGraph, ParamKind, ParamStore, ParamValue};
use crate::sfaa::SourceStats;
use crate::tensor::Tensor;

pub const ARTIFACT_FORMAT: &str = "fwdadapt-artifact";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub kind: ParamKind,
    pub value: ParamValue,
}

/// Per-epoch pretraining log entry.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

/// The one container every pipeline stage consumes and produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact {
    pub format: String,
    pub version: u32,
    pub arch: Architecture,
    pub quantized: bool,
    pub params: Vec<ParamRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_stats: Option<SourceStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub purity: Option<PurityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_log: Option<Vec<EpochLog>>,
}

impl Artifact {
    pub fn from_model(model: &ModelGraph) -> Result<Self> {
        let mut params = Vec::with_capacity(model.store().len());
        for name in model.store().names() {
            params.push(ParamRecord {
                name: name.clone(),
                kind: model.store().kind(name)?,
                value: model.store().value(name)?.clone(),
            });
        }
        Ok(Self {
            format: ARTIFACT_FORMAT.into(),
            version: ARTIFACT_VERSION,
            arch: model.arch(),
            quantized: model.is_quantized(),
            params,
            source_stats: None,
            purity: None,
            training_log: None,
        })
    }

    pub fn to_model(&self) -> Result<ModelGraph> {
        if self.format != ARTIFACT_FORMAT {
            return Err(Error::Artifact(format!(
                "unexpected format tag '{}'",
                self.format
            )));
        }
        if self.version != ARTIFACT_VERSION {
            return Err(Error::Artifact(format!(
                "unsupported version {} (expected {ARTIFACT_VERSION})",
                self.version
            )));
        }
        // start from the architecture skeleton so missing/extra params are caught
        let skeleton = ModelGraph::new(self.arch, 0);
        if self.params.len() != skeleton.store().len() {
            return Err(Error::Artifact(format!(
                "parameter count {} does not match architecture ({} expected)",
                self.params.len(),
                skeleton.store().len()
            )));
        }
        let mut store = ParamStore::default();
        for (rec, expect) in self.params.iter().zip(skeleton.store().names()) {
            if &rec.name != expect {
                return Err(Error::Artifact(format!(
                    "parameter order mismatch: found '{}', expected '{}'",
                    rec.name, expect
                )));
            }
            store.insert(&rec.name, rec.kind, Tensor::zeros(vec![1]));
            store.set_value(&rec.name, rec.value.clone())?;
        }
        Ok(ModelGraph::from_parts(self.arch, store, self.quantized))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let artifact: Artifact = serde_json::from_reader(f)?;
        if artifact.format != ARTIFACT_FORMAT {
            return Err(Error::Artifact(format!(
                "'{}' is not an artifact container",
                artifact.format
            )));
        }
        Ok(artifact)
    }
}

// ---------------------------------------------------------------------------
// Flat binary dataset export
// ---------------------------------------------------------------------------

/// Magic bytes of the export format.
pub const EXPORT_MAGIC: [u8; 4] = *b"FADX";
pub const EXPORT_VERSION: u32 = 1;

/// Write a sample set as: magic, version(u32 LE), C,H,W,count (u32 LE each),
/// then count*C*H*W f32 LE pixels, then count u16 LE labels.
pub fn export_samples(
    out: &mut dyn Write,
    images: &Tensor,
    labels: &[usize],
) -> Result<()> {
    let (n, c, h, w) = images.dims4("export_samples")?;
    if labels.len() != n {
        return Err(Error::Input(format!(
            "export: {n} images but {} labels",
            labels.len()
        )));
    }
    out.write_all(&EXPORT_MAGIC)?;
    out.write_all(&EXPORT_VERSION.to_le_bytes())?;
    for dim in [c, h, w, n] {
        out.write_all(&(dim as u32).to_le_bytes())?;
    }
    for &v in images.data() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    for &l in labels {
        out.write_all(&(l as u16).to_le_bytes())?;
    }
    Ok(())
}

/// Inverse of [`export_samples`].
pub fn import_samples(input: &mut dyn Read) -> Result<(Tensor, Vec<usize>)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != EXPORT_MAGIC {
        return Err(Error::Artifact("bad export magic".into()));
    }
    let mut u32buf = [0u8; 4];
    input.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != EXPORT_VERSION {
        return Err(Error::Artifact(format!("unsupported export version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        input.read_exact(&mut u32buf)?;
        *d = u32::from_le_bytes(u32buf) as usize;
    }
    let [c, h, w, n] = dims;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut f32buf = [0u8; 4];
    for _ in 0..n * c * h * w {
        input.read_exact(&mut f32buf)?;
        data.push(f32::from_le_bytes(f32buf) as f64);
    }
    let mut labels = Vec::with_capacity(n);
    let mut u16buf = [0u8; 2];
    for _ in 0..n {
        input.read_exact(&mut u16buf)?;
        labels.push(u16::from_le_bytes(u16buf) as usize);
    }
    Ok((Tensor::new(vec![n, c, h, w], data)?, labels))
}

/// Descriptor maps embedded in run manifests.
pub type JsonMap = BTreeMap<String, serde_json::Value>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Split, SyntheticDataset};
    use crate::models::ParamSelection;

    #[test]
    fn artifact_roundtrip_preserves_params_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = ModelGraph::new(Architecture::TinyVit, 42);
        let art = Artifact::from_model(&model).unwrap();
        art.save(&path).unwrap();
        let loaded = Artifact::load(&path).unwrap().to_model().unwrap();
        assert_eq!(loaded.arch(), model.arch());
        for name in model.store().names() {
            let a = model.store().tensor(name).unwrap();
            let b = loaded.store().tensor(name).unwrap();
            assert_eq!(a.shape(), b.shape());
            let abits: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bbits: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(abits, bbits, "{name} drifted through JSON");
        }
    }

    #[test]
    fn quantized_artifact_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut model = ModelGraph::new(Architecture::TinyCnn, 1);
        model.quantize().unwrap();
        Artifact::from_model(&model).unwrap().save(&path).unwrap();
        let loaded = Artifact::load(&path).unwrap().to_model().unwrap();
        assert!(loaded.is_quantized());
        let a = model.store().value("stage0.conv.w").unwrap();
        let b = loaded.store().value("stage0.conv.w").unwrap();
        assert_eq!(a, b);
        // selection over the loaded model still works
        ParamSelection::all_layers(&loaded).read(&loaded).unwrap();
    }

    #[test]
    fn corrupted_artifact_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, b"{\"format\": \"other\", \"version\": 1}").unwrap();
        assert!(Artifact::load(&path).is_err());
    }

    #[test]
    fn export_import_roundtrip() {
        let ds = SyntheticDataset::new(9);
        let (imgs, labels) = ds.batch_at(Split::SourceTrain, 0, 10, None).unwrap();
        let mut buf = Vec::new();
        export_samples(&mut buf, &imgs, &labels).unwrap();
        // header is 4 + 4 + 16 bytes, then f32 pixels, then u16 labels
        assert_eq!(buf.len(), 24 + 10 * 256 * 4 + 10 * 2);
        let (back, lback) = import_samples(&mut buf.as_slice()).unwrap();
        assert_eq!(lback, labels);
        assert_eq!(back.shape(), imgs.shape());
        for (a, b) in imgs.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6, "f32 roundtrip too lossy");
        }
    }
}
