//! Samples, manifests and evaluation protocols.
//!
//! A manifest is a UTF-8 line-delimited JSON file. The first non-empty line
//! is a header `{"version": 1, "root": "."}`; every following line is one
//! sample:
//!
//! ```text
//! {"version":1,"root":"."}
//! {"path":"live/000000.png","label":"live","attack_type":"live","subject_id":"s0","split":"train"}
//! {"path":"spoof/000000.png","label":"spoof","attack_type":"print","subject_id":"s0","split":"test","crop_box":[8,8,64,64]}
//! ```
//!
//! `root` is relative to the manifest's directory and sample paths are
//! relative to `root`. An optional `video_id` groups frames of one video for
//! score aggregation. Unknown fields are ignored with a warning.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// Presentation attack instrument tag; `"live"` is reserved for bona fide samples.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttackType(String);

impl AttackType {
    pub const LIVE: &'static str = "live";

    pub fn live() -> Self {
        Self(Self::LIVE.to_string())
    }

    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Config(format!(
                "attack type {name:?} must be a non-empty tag without whitespace"
            )));
        }
        Ok(Self(name))
    }

    pub fn is_live(&self) -> bool {
        self.0 == Self::LIVE
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AttackType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Live,
    Spoof,
}

impl Label {
    pub fn is_spoof(self) -> bool {
        matches!(self, Label::Spoof)
    }

    pub fn is_live(self) -> bool {
        matches!(self, Label::Live)
    }

    /// Binary target `z` of the auxiliary classifier (spoof = 1).
    pub fn target(self) -> f64 {
        if self.is_spoof() {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

/// Pixel rectangle `[x, y, width, height]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CropBox {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl CropBox {
    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.width > 0
            && self.height > 0
            && self.x as u64 + self.width as u64 <= width as u64
            && self.y as u64 + self.height as u64 <= height as u64
    }
}

impl Serialize for CropBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.x, self.y, self.width, self.height].serialize(s)
    }
}

impl<'de> Deserialize<'de> for CropBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x, y, width, height] = <[u32; 4]>::deserialize(d)?;
        Ok(Self { x, y, width, height })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabeledSample {
    /// Resolved path (manifest root joined with the recorded path).
    pub image_path: PathBuf,
    pub label: Label,
    pub attack_type: AttackType,
    pub subject_id: String,
    pub split: Split,
    pub crop_box: Option<CropBox>,
    pub video_id: Option<String>,
}

impl LabeledSample {
    fn check(&self) -> Option<String> {
        match (self.label, self.attack_type.is_live()) {
            (Label::Live, false) => Some(format!(
                "{}: label=live contradicts attack_type={:?}",
                self.image_path.display(),
                self.attack_type.as_str()
            )),
            (Label::Spoof, true) => Some(format!(
                "{}: label=spoof contradicts attack_type=\"live\"",
                self.image_path.display()
            )),
            _ => None,
        }
    }
}

#[derive(Debug, Deserialize)]
struct HeaderRecord {
    version: u32,
    #[serde(default)]
    root: Option<String>,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    path: String,
    label: Label,
    attack_type: String,
    subject_id: String,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    crop_box: Option<CropBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    video_id: Option<String>,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub version: u32,
    pub samples: Vec<LabeledSample>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, samples: Vec<LabeledSample>) -> Result<Self> {
        let m = Self {
            root: root.into(),
            version: MANIFEST_VERSION,
            samples,
        };
        m.validate(false)?;
        Ok(m)
    }

    /// Identifier of a sample: its path relative to the manifest root.
    pub fn sample_id(&self, sample: &LabeledSample) -> String {
        sample
            .image_path
            .strip_prefix(&self.root)
            .unwrap_or(&sample.image_path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    /// Concatenates manifests under a common root.
    pub fn merge(root: impl Into<PathBuf>, parts: &[DatasetManifest]) -> Result<Self> {
        let samples = parts.iter().flat_map(|m| m.samples.iter().cloned()).collect();
        Self::new(root, samples)
    }

    pub fn attack_types(&self) -> BTreeSet<AttackType> {
        self.samples.iter().map(|s| s.attack_type.clone()).collect()
    }

    fn validate(&self, check_crops: bool) -> Result<()> {
        let mut violations = Vec::new();
        let mut seen: HashSet<(Split, &Path)> = HashSet::new();
        for s in &self.samples {
            if let Some(v) = s.check() {
                violations.push(v);
            }
            if !seen.insert((s.split, s.image_path.as_path())) {
                violations.push(format!(
                    "{}: duplicate image path within split {}",
                    s.image_path.display(),
                    s.split
                ));
            }
            if let (true, Some(b)) = (check_crops, s.crop_box) {
                match image::image_dimensions(&s.image_path) {
                    Ok((w, h)) if b.fits(w, h) => {}
                    Ok((w, h)) => violations.push(format!(
                        "{}: crop box {:?} exceeds image bounds {w}x{h}",
                        s.image_path.display(),
                        [b.x, b.y, b.width, b.height]
                    )),
                    Err(e) => violations.push(format!(
                        "{}: cannot read image to check crop box: {e}",
                        s.image_path.display()
                    )),
                }
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Manifest(violations))
        }
    }
}

/// Reads and validates a manifest file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (hline, htext) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty manifest (missing header)".into()))?;
    let header: HeaderRecord = serde_json::from_str(htext)
        .map_err(|e| parse_err(hline, format!("bad header record: {e}")))?;
    if header.version != MANIFEST_VERSION {
        return Err(parse_err(
            hline,
            format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                header.version
            ),
        ));
    }
    warn_unknown(path, hline, &header.extra);
    let root = base.join(header.root.as_deref().unwrap_or("."));

    let mut samples = Vec::new();
    for (lineno, line) in lines {
        let rec: SampleRecord =
            serde_json::from_str(line).map_err(|e| parse_err(lineno, e.to_string()))?;
        warn_unknown(path, lineno, &rec.extra);
        let attack_type =
            AttackType::new(rec.attack_type).map_err(|e| parse_err(lineno, e.to_string()))?;
        samples.push(LabeledSample {
            image_path: root.join(&rec.path),
            label: rec.label,
            attack_type,
            subject_id: rec.subject_id,
            split: rec.split,
            crop_box: rec.crop_box,
            video_id: rec.video_id,
        });
    }
    let manifest = DatasetManifest {
        root,
        version: header.version,
        samples,
    };
    manifest.validate(true)?;
    Ok(manifest)
}

fn warn_unknown(path: &Path, line: usize, extra: &BTreeMap<String, serde_json::Value>) {
    for key in extra.keys() {
        log::warn!("{}:{line}: ignoring unknown field {key:?}", path.display());
    }
}

/// Writes `manifest` to `path`; sample paths are stored relative to the root
/// and the root relative to the manifest's directory whenever possible.
pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let root_rel = manifest
        .root
        .strip_prefix(base)
        .map(|p| {
            if p.as_os_str().is_empty() {
                ".".to_string()
            } else {
                p.to_string_lossy().into_owned()
            }
        })
        .unwrap_or_else(|_| manifest.root.to_string_lossy().into_owned());
    let mut out = String::new();
    out.push_str(&serde_json::json!({"version": manifest.version, "root": root_rel}).to_string());
    out.push('\n');
    for s in &manifest.samples {
        let rec = SampleRecord {
            path: manifest.sample_id(s),
            label: s.label,
            attack_type: s.attack_type.as_str().to_string(),
            subject_id: s.subject_id.clone(),
            split: s.split,
            crop_box: s.crop_box,
            video_id: s.video_id.clone(),
            extra: BTreeMap::new(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serialises"));
        out.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Predicate over `(attack_type, subject_id, split)`. `None` means "any".
/// Live samples carry the attack type `"live"`, so a filter with an explicit
/// attack-type list must name `"live"` to keep bona fide samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFilter {
    pub splits: BTreeSet<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_types: Option<BTreeSet<AttackType>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subjects: Option<BTreeSet<String>>,
}

impl SampleFilter {
    pub fn split(split: Split) -> Self {
        Self {
            splits: [split].into(),
            ..Default::default()
        }
    }

    pub fn matches(&self, s: &LabeledSample) -> bool {
        self.splits.contains(&s.split)
            && self
                .attack_types
                .as_ref()
                .is_none_or(|t| t.contains(&s.attack_type))
            && self
                .subjects
                .as_ref()
                .is_none_or(|t| t.contains(&s.subject_id))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalProtocol {
    pub name: String,
    #[serde(rename = "train")]
    pub train_filter: SampleFilter,
    #[serde(rename = "test")]
    pub test_filter: SampleFilter,
    /// Development set for threshold selection; defaults to the `dev` split.
    #[serde(rename = "dev", default = "default_dev_filter")]
    pub dev_filter: SampleFilter,
    #[serde(default)]
    pub unseen_attacks: BTreeSet<AttackType>,
}

fn default_dev_filter() -> SampleFilter {
    SampleFilter::split(Split::Dev)
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            name: "default".into(),
            train_filter: SampleFilter::split(Split::Train),
            test_filter: SampleFilter::split(Split::Test),
            dev_filter: default_dev_filter(),
            unseen_attacks: BTreeSet::new(),
        }
    }
}

impl EvalProtocol {
    pub fn with_unseen(mut self, unseen: impl IntoIterator<Item = AttackType>) -> Self {
        self.unseen_attacks.extend(unseen);
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("protocol serialises");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Sample sets selected by a protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedProtocol {
    pub train: Vec<LabeledSample>,
    pub dev: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

pub fn resolve_protocol(
    manifest: &DatasetManifest,
    protocol: &EvalProtocol,
) -> Result<ResolvedProtocol> {
    let present = manifest.attack_types();
    let referenced = [&protocol.train_filter, &protocol.test_filter, &protocol.dev_filter]
        .into_iter()
        .filter_map(|f| f.attack_types.as_ref())
        .flatten()
        .chain(&protocol.unseen_attacks);
    let unknown: BTreeSet<_> = referenced.filter(|t| !present.contains(*t)).collect();
    if !unknown.is_empty() {
        return Err(Error::Config(format!(
            "protocol {:?} references attack types absent from the manifest: {:?}",
            protocol.name,
            unknown.iter().map(|t| t.as_str()).collect::<Vec<_>>()
        )));
    }

    let select = |f: &SampleFilter, drop_unseen: bool| -> Vec<LabeledSample> {
        manifest
            .samples
            .iter()
            .filter(|s| f.matches(s))
            .filter(|s| !(drop_unseen && protocol.unseen_attacks.contains(&s.attack_type)))
            .cloned()
            .collect()
    };
    let train = select(&protocol.train_filter, true);
    let test = select(&protocol.test_filter, false);
    let dev = select(&protocol.dev_filter, false);
    if train.is_empty() {
        return Err(Error::Empty(format!("protocol {:?}: train set", protocol.name)));
    }
    if test.is_empty() {
        return Err(Error::Empty(format!("protocol {:?}: test set", protocol.name)));
    }
    let train_paths: HashSet<&Path> = train.iter().map(|s| s.image_path.as_path()).collect();
    let leaked: Vec<String> = test
        .iter()
        .filter(|s| train_paths.contains(s.image_path.as_path()))
        .map(|s| s.image_path.display().to_string())
        .collect();
    if !leaked.is_empty() {
        return Err(Error::Config(format!(
            "protocol {:?}: train and test sets overlap on {} samples (first: {})",
            protocol.name,
            leaked.len(),
            leaked[0]
        )));
    }
    Ok(ResolvedProtocol { train, dev, test })
}
