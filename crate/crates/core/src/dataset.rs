//! Manifest-driven datasets, patient-level split checks and training-time
//! augmentation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image, sample_bilinear, GrayImage};
use crate::seed::SeedSpec;

pub const MANIFEST_HEADER: [&str; 5] = ["id", "image_path", "label", "patient_id", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!(
                "unknown split {other:?} (expected train, val or test)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: PathBuf,
    /// 1 = haemorrhage present.
    pub label: u8,
    pub patient_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<ManifestRecord>,
    root: PathBuf,
}

impl Dataset {
    /// Rejects duplicate ids. Patient leakage is reported by
    /// [`validate_splits`], not rejected here.
    pub fn new(records: Vec<ManifestRecord>, root: PathBuf) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::invalid(format!("duplicate id {:?}", r.id)));
            }
            if r.label > 1 {
                return Err(Error::invalid(format!("{}: label must be 0 or 1", r.id)));
            }
        }
        Ok(Self { records, root })
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        if record.image_path.is_absolute() {
            record.image_path.clone()
        } else {
            self.root.join(&record.image_path)
        }
    }

    pub fn load(&self, record: &ManifestRecord) -> Result<GrayImage> {
        load_image(self.resolve(record))
    }

    /// Errors unless every patient sits in exactly one split.
    pub fn require_clean_splits(&self) -> Result<()> {
        let report = validate_splits(self);
        if report.pass {
            Ok(())
        } else {
            Err(Error::Invalid(report.to_text()))
        }
    }
}

/// Parses a manifest CSV. Relative image paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let bad = |line: u64, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let headers = reader.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    if headers.iter().map(str::trim).ne(MANIFEST_HEADER.iter().copied()) {
        return Err(bad(
            1,
            format!(
                "header must be {:?}, got {:?}",
                MANIFEST_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            bad(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let id = field(0);
        if id.is_empty() {
            return Err(bad(line, "empty id".into()));
        }
        let label = match field(2) {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(line, format!("label {other:?} is not 0 or 1"))),
        };
        let split = field(4).parse::<Split>().map_err(|m| bad(line, m))?;
        if field(3).is_empty() {
            return Err(bad(line, "empty patient_id".into()));
        }
        if !seen.insert(id.to_string()) {
            return Err(bad(line, format!("duplicate id {id:?}")));
        }
        records.push(ManifestRecord {
            id: id.to_string(),
            image_path: PathBuf::from(field(1)),
            label,
            patient_id: field(3).to_string(),
            split,
        });
    }
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Dataset::new(records, root)
}

pub fn write_manifest(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(MANIFEST_HEADER).map_err(io)?;
    for r in &ds.records {
        w.write_record([
            r.id.as_str(),
            &r.image_path.to_string_lossy(),
            if r.label == 1 { "1" } else { "0" },
            r.patient_id.as_str(),
            r.split.as_str(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientLeak {
    pub patient_id: String,
    pub splits: Vec<Split>,
}

/// Outcome of a patient-level leakage check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitReport {
    pub pass: bool,
    pub n_records: usize,
    pub n_patients: usize,
    pub leaks: Vec<PatientLeak>,
}

impl SplitReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "split check: {} ({} records, {} patients)\n",
            if self.pass { "PASS" } else { "FAIL" },
            self.n_records,
            self.n_patients
        );
        for leak in &self.leaks {
            let splits: Vec<&str> = leak.splits.iter().map(|s| s.as_str()).collect();
            s.push_str(&format!("  {}:{{{}}}\n", leak.patient_id, splits.join(",")));
        }
        s
    }
}

/// PASS iff every patient id maps to exactly one split.
pub fn validate_splits(ds: &Dataset) -> SplitReport {
    let mut by_patient: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    for r in &ds.records {
        by_patient.entry(&r.patient_id).or_default().insert(r.split);
    }
    let leaks: Vec<PatientLeak> = by_patient
        .iter()
        .filter(|(_, s)| s.len() > 1)
        .map(|(p, s)| PatientLeak {
            patient_id: p.to_string(),
            splits: s.iter().copied().collect(),
        })
        .collect();
    SplitReport {
        pass: leaks.is_empty(),
        n_records: ds.records.len(),
        n_patients: by_patient.len(),
        leaks,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub rotate_deg_max: f64,
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    pub translate_frac_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate_deg_max: 15.0,
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            translate_frac_max: 0.10,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            rotate_deg_max: 0.0,
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
            translate_frac_max: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.rotate_deg_max >= 0.0 && self.rotate_deg_max.is_finite())
            || !prob(self.flip_h_prob)
            || !prob(self.flip_v_prob)
            || !(0.0..1.0).contains(&self.translate_frac_max)
        {
            return Err(Error::invalid(format!("invalid augmentation config {self:?}")));
        }
        Ok(())
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    /// Translation as a fraction of width / height.
    pub shift_x: f64,
    pub shift_y: f64,
}

pub fn sample_augment(cfg: &AugmentConfig, item_seed: SeedSpec) -> AugmentParams {
    let mut rng = item_seed.rng();
    let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let angle_deg = sym(cfg.rotate_deg_max);
    let shift_x = sym(cfg.translate_frac_max);
    let shift_y = sym(cfg.translate_frac_max);
    AugmentParams {
        angle_deg,
        flip_h: rng.random_bool(cfg.flip_h_prob),
        flip_v: rng.random_bool(cfg.flip_v_prob),
        shift_x,
        shift_y,
    }
}

/// Continuous mirror reflection into `[0, n-1]`.
fn reflect_coord(v: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let max = (n - 1) as f64;
    let period = 2.0 * max;
    let m = v.rem_euclid(period);
    if m > max {
        period - m
    } else {
        m
    }
}

/// Flip, then rotate about the centre, then translate. Resampled bilinearly
/// with mirror fill outside the frame.
pub fn apply_augment(img: &GrayImage, p: &AugmentParams) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let theta = p.angle_deg.to_radians();
    let (c, s) = (theta.cos(), theta.sin());
    let (tx, ty) = (p.shift_x * w as f64, p.shift_y * h as f64);
    GrayImage::from_fn(w, h, |x, y| {
        // Inverse map from output pixel to source coordinate.
        let dx = x as f64 - tx - cx;
        let dy = y as f64 - ty - cy;
        let mut sx = c * dx + s * dy + cx;
        let mut sy = -s * dx + c * dy + cy;
        if p.flip_h {
            sx = (w - 1) as f64 - sx;
        }
        if p.flip_v {
            sy = (h - 1) as f64 - sy;
        }
        sample_bilinear(img, reflect_coord(sx, w), reflect_coord(sy, h))
    })
}

/// Random training-time augmentation, deterministic in `item_seed`. Only
/// training code paths call this.
pub fn augment(img: &GrayImage, cfg: &AugmentConfig, item_seed: SeedSpec) -> GrayImage {
    apply_augment(img, &sample_augment(cfg, item_seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::phantom;
    use std::io::Write;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("m.csv");
        File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    fn rec(id: &str, patient: &str, split: Split) -> ManifestRecord {
        ManifestRecord {
            id: id.into(),
            image_path: format!("{id}.png").into(),
            label: 0,
            patient_id: patient.into(),
            split,
        }
    }

    #[test]
    fn parses_valid_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "id,image_path,label,patient_id,split\na,a.png,0,P1,train\nb,b.png,1,P2,val\nc,c.png,0,P3,test\n",
        );
        let ds = load_manifest(&p).unwrap();
        assert_eq!(ds.records().len(), 3);
        assert_eq!(ds.records()[1].split, Split::Val);
        assert_eq!(ds.resolve(&ds.records()[0]), dir.path().join("a.png"));
    }

    #[test]
    fn rejects_bad_rows_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "id,image_path,label,patient_id,split\na,a.png,0,P1,train\nb,b.png,1,P2,eval\n",
        );
        let msg = load_manifest(&p).unwrap_err().to_string();
        assert!(msg.contains("line 3") && msg.contains("eval"), "{msg}");

        let p = write(
            dir.path(),
            "id,image_path,label,patient_id,split\na,a.png,0,P1,train\na,b.png,1,P2,test\n",
        );
        assert!(load_manifest(&p).unwrap_err().to_string().contains("duplicate"));

        let p = write(dir.path(), "id,image_path,label,patient_id,split\na,a.png,2,P1,train\n");
        assert!(load_manifest(&p).is_err());
        let p = write(dir.path(), "id,path,label,patient,split\n");
        assert!(load_manifest(&p).unwrap_err().to_string().contains("line 1"));
        let p = write(dir.path(), "id,image_path,label,patient_id,split\na,a.png,0\n");
        assert!(load_manifest(&p).is_err());
        assert!(load_manifest(dir.path().join("missing.csv")).unwrap_err().is_io());
    }

    #[test]
    fn large_manifest_roundtrips_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("id,image_path,label,patient_id,split\n");
        for i in 0..10_000 {
            let split = ["train", "val", "test"][(i / 10) % 3];
            body.push_str(&format!("s{i},img/s{i}.png,{},P{},{split}\n", i % 2, i / 10));
        }
        let p = write(dir.path(), &body);
        let ds = load_manifest(&p).unwrap();
        assert_eq!(ds.records().len(), 10_000);
        let out = dir.path().join("out.csv");
        write_manifest(&ds, &out).unwrap();
        assert_eq!(std::fs::read_to_string(out).unwrap(), body);
    }

    #[test]
    fn leak_detection() {
        let ds = Dataset::new(
            vec![rec("a", "P7", Split::Train), rec("b", "P7", Split::Test), rec("c", "P8", Split::Val)],
            ".".into(),
        )
        .unwrap();
        let r = validate_splits(&ds);
        assert!(!r.pass);
        assert_eq!(
            r.leaks,
            vec![PatientLeak { patient_id: "P7".into(), splits: vec![Split::Train, Split::Test] }]
        );
        assert!(r.to_text().contains("P7:{train,test}"));
        assert!(ds.require_clean_splits().is_err());

        let clean = Dataset::new(
            vec![rec("a", "P1", Split::Train), rec("b", "P1", Split::Train), rec("c", "P2", Split::Test)],
            ".".into(),
        )
        .unwrap();
        assert!(validate_splits(&clean).pass);
    }

    #[test]
    fn validation_is_order_invariant() {
        let mut recs: Vec<ManifestRecord> = (0..60)
            .map(|i| rec(&format!("s{i}"), &format!("P{}", i % 13), [Split::Train, Split::Test][i % 2]))
            .collect();
        let a = validate_splits(&Dataset::new(recs.clone(), ".".into()).unwrap());
        recs.reverse();
        recs.swap(3, 40);
        let b = validate_splits(&Dataset::new(recs, ".".into()).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn null_augmentation_is_identity() {
        let img = phantom(24, 20, true, 1);
        assert_eq!(augment(&img, &AugmentConfig::none(), SeedSpec::new(1, 1)), img);
    }

    #[test]
    fn forced_double_flip_restores() {
        let img = phantom(24, 20, true, 2);
        let p = AugmentParams { flip_h: true, ..Default::default() };
        let once = apply_augment(&img, &p);
        assert_ne!(once, img);
        assert_eq!(apply_augment(&once, &p), img);
        let p = AugmentParams { flip_v: true, ..Default::default() };
        assert_eq!(apply_augment(&apply_augment(&img, &p), &p), img);
    }

    #[test]
    fn rotation_inverse_loses_little() {
        let img = phantom(128, 128, true, 3);
        let cfg = AugmentConfig::default();
        let theta = sample_augment(&cfg, SeedSpec::new(4, 4)).angle_deg;
        let fwd = apply_augment(&img, &AugmentParams { angle_deg: theta, ..Default::default() });
        let back = apply_augment(&fwd, &AugmentParams { angle_deg: -theta, ..Default::default() });
        let mad = img
            .pixels()
            .iter()
            .zip(back.pixels())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / img.len() as f64;
        assert!(mad < 0.02, "mean abs deviation {mad}");
    }

    #[test]
    fn augmentation_is_deterministic_and_in_range() {
        let img = phantom(32, 32, true, 5);
        let cfg = AugmentConfig::default();
        for s in 0..20 {
            let a = augment(&img, &cfg, SeedSpec::new(s, 9));
            assert_eq!(a, augment(&img, &cfg, SeedSpec::new(s, 9)));
            assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let p = sample_augment(&cfg, SeedSpec::new(3, 3));
        assert!(p.angle_deg.abs() <= 15.0 && p.shift_x.abs() <= 0.1 && p.shift_y.abs() <= 0.1);
        assert!(AugmentConfig { flip_h_prob: 1.5, ..cfg }.validate().is_err());
    }
}
