//! On-disk formats: JSON keypoint, label and match files, pair directories,
//! and the little-endian binary weights file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::encoder::KeypointSet;
use crate::error::{Error, Result};
use crate::matching::Match;
use crate::model::{Ablation, Model, ModelConfig};
use crate::scalar::Scalar;
use crate::synth::{PairSample, SceneConfig};
use crate::tensor::Tensor;
use crate::training::labels::GroundTruthLabels;

pub const KEYPOINT_FORMAT_VERSION: u32 = 1;
pub const WEIGHTS_MAGIC: &[u8; 8] = b"SPMATCHW";
pub const WEIGHTS_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

fn parse_json<D: DeserializeOwned>(text: &str, what: &str) -> Result<D> {
    // serde_json reports line and column in its message
    serde_json::from_str(text).map_err(|e| Error::Parse(format!("{what}: {e}")))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))
}

/// Writes through a sibling temp file so a failed write leaves nothing behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn to_json<S: Serialize>(value: &S) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    text.into_bytes()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

/// One image's keypoints and descriptors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointFile {
    pub version: u32,
    pub width: f64,
    pub height: f64,
    /// Declared descriptor length; checked against the data when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    pub keypoints: Vec<Point>,
    pub descriptors: Vec<Vec<f64>>,
}

impl KeypointFile {
    pub fn from_set<T: Scalar>(set: &KeypointSet<T>) -> Self {
        Self {
            version: KEYPOINT_FORMAT_VERSION,
            width: set.width,
            height: set.height,
            dim: Some(set.dim()),
            keypoints: set.positions.iter().map(|p| Point { x: p[0], y: p[1] }).collect(),
            descriptors: set
                .descriptors
                .to_rows()
                .into_iter()
                .map(|r| r.into_iter().map(Scalar::as_f64).collect())
                .collect(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: Self = parse_json(text, "keypoint file")?;
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&read_text(path)?).map_err(|e| with_path(e, path))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &to_json(self))
    }

    /// Structural checks; a violated one is reported as a parse error.
    pub fn validate(&self) -> Result<()> {
        if self.version != KEYPOINT_FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported keypoint file version {} (expected {KEYPOINT_FORMAT_VERSION})",
                self.version
            )));
        }
        if self.keypoints.len() != self.descriptors.len() {
            return Err(Error::Parse(format!(
                "{} keypoints but {} descriptors",
                self.keypoints.len(),
                self.descriptors.len()
            )));
        }
        let dim = self.dim.or_else(|| self.descriptors.first().map(Vec::len));
        if let Some(d) = dim {
            if let Some(i) = self.descriptors.iter().position(|r| r.len() != d) {
                return Err(Error::Parse(format!(
                    "descriptor {i} has length {}, expected {d}",
                    self.descriptors[i].len()
                )));
            }
        }
        Ok(())
    }

    /// Descriptor length (declared, else taken from the data).
    pub fn descriptor_dim(&self) -> usize {
        self.dim.or_else(|| self.descriptors.first().map(Vec::len)).unwrap_or(0)
    }

    pub fn to_set<T: Scalar>(&self) -> Result<KeypointSet<T>> {
        let d = self.descriptor_dim();
        let data = self.descriptors.iter().flatten().map(|&v| T::of(v)).collect();
        let descriptors = Tensor::from_vec(self.descriptors.len(), d, data)?;
        let positions = self.keypoints.iter().map(|p| [p.x, p.y]).collect();
        KeypointSet::new(positions, descriptors, self.width, self.height).map_err(|e| Error::Parse(e.to_string()))
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    }
}

/// Ground truth of one pair, stored next to its two keypoint files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelsFile {
    pub version: u32,
    pub matches: Vec<(usize, usize)>,
    pub non_repeatable_a: Vec<usize>,
    pub non_repeatable_b: Vec<usize>,
    #[serde(default)]
    pub proj_ab: Vec<Option<[f64; 2]>>,
    #[serde(default)]
    pub proj_ba: Vec<Option<[f64; 2]>>,
}

impl LabelsFile {
    pub fn labels(&self) -> GroundTruthLabels {
        GroundTruthLabels {
            matches: self.matches.clone(),
            non_repeatable_a: self.non_repeatable_a.clone(),
            non_repeatable_b: self.non_repeatable_b.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub a: String,
    pub b: String,
    pub labels: String,
}

/// Index of a generated pair directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub count: usize,
    pub seed: u64,
    pub scene: SceneConfig,
    pub pairs: Vec<PairEntry>,
}

fn pair_entry(i: usize) -> PairEntry {
    PairEntry {
        a: format!("pair_{i:05}_a.json"),
        b: format!("pair_{i:05}_b.json"),
        labels: format!("pair_{i:05}_labels.json"),
    }
}

/// Writes every pair as two keypoint files plus a labels sidecar, and a
/// manifest echoing the scene configuration.
pub fn save_dataset<T: Scalar>(dir: &Path, scene: &SceneConfig, pairs: &[PairSample<T>]) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let e = pair_entry(i);
        KeypointFile::from_set(&pair.kps_a).save(&dir.join(&e.a))?;
        KeypointFile::from_set(&pair.kps_b).save(&dir.join(&e.b))?;
        let labels = LabelsFile {
            version: KEYPOINT_FORMAT_VERSION,
            matches: pair.labels.matches.clone(),
            non_repeatable_a: pair.labels.non_repeatable_a.clone(),
            non_repeatable_b: pair.labels.non_repeatable_b.clone(),
            proj_ab: pair.proj_ab.clone(),
            proj_ba: pair.proj_ba.clone(),
        };
        write_atomic(&dir.join(&e.labels), &to_json(&labels))?;
        entries.push(e);
    }
    let manifest = Manifest {
        version: KEYPOINT_FORMAT_VERSION,
        count: pairs.len(),
        seed: scene.seed,
        scene: scene.clone(),
        pairs: entries,
    };
    write_atomic(&dir.join(MANIFEST_NAME), &to_json(&manifest))?;
    Ok(manifest)
}

/// Reads a directory written by [`save_dataset`]. A missing labels sidecar
/// is a parse error.
pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<Vec<PairSample<T>>> {
    let path = dir.join(MANIFEST_NAME);
    let manifest: Manifest = parse_json(&read_text(&path)?, "manifest").map_err(|e| with_path(e, &path))?;
    if manifest.count != manifest.pairs.len() {
        return Err(Error::Parse(format!(
            "manifest declares {} pairs but lists {}",
            manifest.count,
            manifest.pairs.len()
        )));
    }
    manifest
        .pairs
        .iter()
        .map(|e| {
            let kps_a = KeypointFile::load(&dir.join(&e.a))?.to_set()?;
            let kps_b = KeypointFile::load(&dir.join(&e.b))?.to_set()?;
            let lp: PathBuf = dir.join(&e.labels);
            if !lp.exists() {
                return Err(Error::Parse(format!("missing labels sidecar {}", lp.display())));
            }
            let lf: LabelsFile = parse_json(&read_text(&lp)?, "labels file").map_err(|er| with_path(er, &lp))?;
            let labels = lf.labels();
            if !labels.is_consistent(kps_a.len(), kps_b.len()) {
                return Err(Error::Parse(format!(
                    "{}: labels do not fit the keypoint files",
                    lp.display()
                )));
            }
            Ok(PairSample {
                kps_a,
                kps_b,
                proj_ab: lf.proj_ab,
                proj_ba: lf.proj_ba,
                labels,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub num_matches: usize,
    pub keypoints_a: usize,
    pub keypoints_b: usize,
    /// `None` when there are no matches.
    pub mean_confidence: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchesFile {
    pub matches: Vec<Match>,
    pub summary: MatchSummary,
}

impl MatchesFile {
    pub fn new(matches: Vec<Match>, keypoints_a: usize, keypoints_b: usize) -> Self {
        let mean_confidence =
            (!matches.is_empty()).then(|| matches.iter().map(|m| m.confidence).sum::<f64>() / matches.len() as f64);
        Self {
            summary: MatchSummary {
                num_matches: matches.len(),
                keypoints_a,
                keypoints_b,
                mean_confidence,
            },
            matches,
        }
    }

    pub fn to_json(&self) -> Vec<u8> {
        to_json(self)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        parse_json(text, "matches file")
    }
}

// Weights layout, all little-endian:
//   magic[8] version:u32 dtype:u8 dim heads ica_layers units k sinkhorn_iters:u32
//   ablation:u8 count:u32 { name_len:u32 name rows:u32 cols:u32 data }* crc32:u32
// The checksum covers every byte before it.

fn dtype_code<T: Scalar>() -> u8 {
    std::mem::size_of::<T>() as u8
}

/// Serializes the model in its own precision.
pub fn weights_to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::with_capacity(64 + model.num_parameters() * std::mem::size_of::<T>());
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.push(dtype_code::<T>());
    for v in [c.dim, c.heads, c.ica_layers, c.units, c.k, c.sinkhorn_iters] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(c.ablation.bits());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for &v in p.value.data() {
            if dtype_code::<T>() == 4 {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(Error::Checksum)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a weights file. The checksum is verified before anything else, so
/// truncation or corruption anywhere is reported as [`Error::Checksum`].
/// Values are converted to `T` if the file was written in another precision.
pub fn weights_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    if bytes.len() < WEIGHTS_MAGIC.len() + 4 + 4 {
        return Err(Error::Checksum);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checksum);
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(WEIGHTS_MAGIC.len())? != WEIGHTS_MAGIC {
        return Err(Error::Parse("not a weights file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Parse(format!(
            "unsupported weights version {version} (expected {WEIGHTS_VERSION})"
        )));
    }
    let dtype = r.u8()?;
    if dtype != 4 && dtype != 8 {
        return Err(Error::Parse(format!("unknown scalar width {dtype}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        dim: dims[0],
        heads: dims[1],
        ica_layers: dims[2],
        units: dims[3],
        k: dims[4],
        sinkhorn_iters: dims[5],
        ablation: Ablation::from_bits(r.u8()?),
    };
    let mut model = Model::<T>::new(config, 0)?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::Parse(format!(
            "weights hold {count} tensors, configuration expects {}",
            model.store.len()
        )));
    }
    for p in model.store.iter_mut() {
        let len = r.u32()? as usize;
        let name = String::from_utf8_lossy(r.take(len)?).into_owned();
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        if name != p.name || (rows, cols) != p.value.shape() {
            return Err(Error::Parse(format!(
                "tensor {name} {rows}x{cols} does not match expected {} {:?}",
                p.name,
                p.value.shape()
            )));
        }
        for v in p.value.data_mut() {
            *v = if dtype == 4 {
                T::of(f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as f64)
            } else {
                T::of(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")))
            };
        }
    }
    if r.pos != body.len() {
        return Err(Error::Parse("trailing bytes after the last tensor".into()));
    }
    Ok(model)
}

pub fn save_weights<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    write_atomic(path, &weights_to_bytes(model))
}

pub fn load_weights<T: Scalar>(path: &Path) -> Result<Model<T>> {
    weights_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_round_trip_bitwise() {
        let model = Model::<f32>::new(ModelConfig::desk(), 3).unwrap();
        let bytes = weights_to_bytes(&model);
        let back: Model<f32> = weights_from_bytes(&bytes).unwrap();
        assert_eq!(back.config, model.config);
        for ((_, a), (_, b)) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            let same = a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{}", a.name);
        }
    }

    #[test]
    fn truncation_and_corruption_fail_checksum() {
        let model = Model::<f32>::new(ModelConfig::desk(), 1).unwrap();
        let bytes = weights_to_bytes(&model);
        for cut in [0, 3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(weights_from_bytes::<f32>(&bytes[..cut]), Err(Error::Checksum)),
                "cut {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[100] ^= 0x40;
        assert!(matches!(weights_from_bytes::<f32>(&bad), Err(Error::Checksum)));
    }

    #[test]
    fn keypoint_parse_errors_carry_position() {
        let err = KeypointFile::from_json_str("{\n  \"version\": 1,\n  \"width\": oops }").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        let text = r#"{"version":1,"width":10,"height":10,"keypoints":[{"x":1,"y":1}],"descriptors":[]}"#;
        assert!(matches!(KeypointFile::from_json_str(text), Err(Error::Parse(_))));
        let text = r#"{"version":1,"width":10,"height":10,"dim":3,"keypoints":[{"x":1,"y":1}],"descriptors":[[1,0]]}"#;
        assert!(matches!(KeypointFile::from_json_str(text), Err(Error::Parse(_))));
    }

    #[test]
    fn matches_summary() {
        let m = |c| Match {
            index_a: 0,
            index_b: 1,
            confidence: c,
        };
        let f = MatchesFile::new(vec![m(0.5), m(0.7)], 4, 5);
        assert_eq!(f.summary.num_matches, 2);
        assert!((f.summary.mean_confidence.unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(MatchesFile::new(vec![], 4, 5).summary.mean_confidence, None);
    }
}
