//! On-disk ingestion bundle.
//!
//! A bundle is a directory:
//!
//! | file            | contents                                                   |
//! |-----------------|------------------------------------------------------------|
//! | `manifest.json` | version, dataset id, `n_samples`, `d_g`, `d_s`, file names |
//! | `ids.jsonl`     | one JSON string id per line                                |
//! | `grad.f32`      | `n_samples × d_g` little-endian f32, row-major             |
//! | `sem.f32`       | `n_samples × d_s` little-endian f32, row-major             |
//! | `nll_img.f32`   | flat per-token NLL with image context                      |
//! | `nll_txt.f32`   | flat per-token NLL without image context                   |
//! | `offsets.u64`   | `n_samples + 1` little-endian u64 offsets into the NLLs    |
//! | `scalars.f32`   | `(el2n_raw, entropy_raw)` per sample                       |
//!
//! Both NLL streams share `offsets.u64`. A manifest may name an extra
//! `offsets_txt` file giving the text-only stream its own offsets; the
//! writer never emits one, but the validator checks per-sample length
//! agreement when it is present.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SampleRecord;
use crate::error::{Error, Result};

pub const BUNDLE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleFiles {
    pub ids: String,
    pub grad: String,
    pub sem: String,
    pub nll_img: String,
    pub nll_txt: String,
    pub offsets: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offsets_txt: Option<String>,
    pub scalars: String,
}

impl Default for BundleFiles {
    fn default() -> Self {
        Self {
            ids: "ids.jsonl".into(),
            grad: "grad.f32".into(),
            sem: "sem.f32".into(),
            nll_img: "nll_img.f32".into(),
            nll_txt: "nll_txt.f32".into(),
            offsets: "offsets.u64".into(),
            offsets_txt: None,
            scalars: "scalars.f32".into(),
        }
    }
}

impl BundleFiles {
    fn all(&self) -> Vec<&str> {
        let mut v = vec![
            self.ids.as_str(),
            self.grad.as_str(),
            self.sem.as_str(),
            self.nll_img.as_str(),
            self.nll_txt.as_str(),
            self.offsets.as_str(),
            self.scalars.as_str(),
        ];
        if let Some(t) = &self.offsets_txt {
            v.push(t);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub version: u32,
    pub dataset_id: String,
    pub n_samples: usize,
    pub d_g: usize,
    pub d_s: usize,
    pub files: BundleFiles,
}

/// In-memory bundle contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub dataset_id: String,
    pub d_g: usize,
    pub d_s: usize,
    pub records: Vec<SampleRecord>,
}

impl Bundle {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records stamped with the timestep they enter the pool.
    pub fn into_records(self, timestep: u64) -> Vec<SampleRecord> {
        self.records
            .into_iter()
            .map(|mut r| {
                r.timestep_added = timestep;
                r
            })
            .collect()
    }
}

/// The first failed check of a bundle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationFailure {
    pub check: &'static str,
    pub message: String,
    pub sample: Option<usize>,
}

impl fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FATAL [{}] {}", self.check, self.message)?;
        if let Some(s) = self.sample {
            write!(f, " (sample {s})")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub check: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Per-check outcome. Validation stops at the first failure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
    pub failure: Option<ValidationFailure>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = if c.passed { "ok  " } else { "FAIL" };
            writeln!(f, "{tag} {:<14} {}", c.check, c.detail)?;
        }
        if let Some(fail) = &self.failure {
            writeln!(f, "{fail}")?;
        }
        Ok(())
    }
}

struct Checker {
    checks: Vec<CheckResult>,
}

type Checked<T> = std::result::Result<T, ValidationFailure>;

impl Checker {
    fn pass(&mut self, check: &'static str, detail: impl Into<String>) {
        self.checks.push(CheckResult {
            check,
            passed: true,
            detail: detail.into(),
        });
    }

    fn fail(&mut self, f: &ValidationFailure) {
        self.checks.push(CheckResult {
            check: f.check,
            passed: false,
            detail: f.message.clone(),
        });
    }
}

fn fatal(check: &'static str, message: impl Into<String>, sample: Option<usize>) -> ValidationFailure {
    ValidationFailure {
        check,
        message: message.into(),
        sample,
    }
}

fn read_bytes(dir: &Path, name: &str) -> Checked<Vec<u8>> {
    let path = dir.join(name);
    fs::read(&path).map_err(|e| fatal("files", format!("cannot read {}: {e}", path.display()), None))
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn u64s(bytes: &[u8]) -> Vec<u64> {
    bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

fn expect_len(check: &'static str, name: &str, got: usize, want: usize) -> Checked<()> {
    if got != want {
        return Err(fatal(
            check,
            format!("{name} is {got} bytes, expected {want}"),
            None,
        ));
    }
    Ok(())
}

fn check_offsets(check: &'static str, offsets: &[u64]) -> Checked<()> {
    if offsets[0] != 0 {
        return Err(fatal(check, format!("first offset is {}, expected 0", offsets[0]), None));
    }
    for (i, w) in offsets.windows(2).enumerate() {
        if w[1] < w[0] {
            return Err(fatal(check, "offsets are not monotone", Some(i)));
        }
        if w[1] == w[0] {
            return Err(fatal(check, "empty NLL span", Some(i)));
        }
    }
    Ok(())
}

fn check_finite(what: &str, values: &[f32], width: usize, non_negative: bool) -> Checked<()> {
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() || (non_negative && *v < 0.0) {
            let kind = if v.is_finite() { "negative" } else { "non-finite" };
            return Err(fatal(
                "finite",
                format!("{kind} value {v} in {what} at element {}", i % width.max(1)),
                Some(i / width.max(1)),
            ));
        }
    }
    Ok(())
}

fn nll_sample_at(offsets: &[u64], flat_index: usize) -> usize {
    offsets.partition_point(|&o| o as usize <= flat_index) - 1
}

/// Fully parsed and validated bundle, produced alongside the report.
fn run_checks(dir: &Path, ck: &mut Checker) -> Checked<Bundle> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        fatal("manifest", format!("cannot read {}: {e}", manifest_path.display()), None)
    })?;
    let m: BundleManifest = serde_json::from_str(&text)
        .map_err(|e| fatal("manifest", format!("does not parse: {e}"), None))?;
    if m.version != BUNDLE_VERSION {
        return Err(fatal("manifest", format!("unsupported version {}", m.version), None));
    }
    if m.d_g == 0 || m.d_s == 0 {
        return Err(fatal("manifest", "vector dimensions must be positive", None));
    }
    ck.pass(
        "manifest",
        format!("{} samples, d_g {}, d_s {}", m.n_samples, m.d_g, m.d_s),
    );

    for name in m.files.all() {
        if !dir.join(name).is_file() {
            return Err(fatal("files", format!("missing file {name}"), None));
        }
    }
    ck.pass("files", "all present");

    let n = m.n_samples;
    let ids_text = fs::read_to_string(dir.join(&m.files.ids))
        .map_err(|e| fatal("ids", format!("unreadable: {e}"), None))?;
    let mut ids = Vec::with_capacity(n);
    let mut seen = HashSet::with_capacity(n);
    for (i, line) in ids_text.lines().enumerate() {
        let id: String = serde_json::from_str(line)
            .map_err(|e| fatal("ids", format!("line {} is not a JSON string: {e}", i + 1), Some(i)))?;
        if id.is_empty() {
            return Err(fatal("ids", "empty id", Some(i)));
        }
        if !seen.insert(id.clone()) {
            return Err(fatal("ids", format!("duplicate id `{id}`"), Some(i)));
        }
        ids.push(id);
    }
    if ids.len() != n {
        return Err(fatal("ids", format!("{} ids for {n} samples", ids.len()), None));
    }
    ck.pass("ids", format!("{n} unique"));

    let grad = read_bytes(dir, &m.files.grad)?;
    expect_len("grad_bytes", &m.files.grad, grad.len(), n * m.d_g * 4)?;
    ck.pass("grad_bytes", format!("{} bytes", grad.len()));
    let sem = read_bytes(dir, &m.files.sem)?;
    expect_len("sem_bytes", &m.files.sem, sem.len(), n * m.d_s * 4)?;
    ck.pass("sem_bytes", format!("{} bytes", sem.len()));
    let scalars = read_bytes(dir, &m.files.scalars)?;
    expect_len("scalar_bytes", &m.files.scalars, scalars.len(), n * 2 * 4)?;
    ck.pass("scalar_bytes", format!("{} bytes", scalars.len()));

    let off_bytes = read_bytes(dir, &m.files.offsets)?;
    expect_len("offsets", &m.files.offsets, off_bytes.len(), (n + 1) * 8)?;
    let offsets = u64s(&off_bytes);
    check_offsets("offsets", &offsets)?;
    let offsets_txt = match &m.files.offsets_txt {
        Some(name) => {
            let b = read_bytes(dir, name)?;
            expect_len("offsets", name, b.len(), (n + 1) * 8)?;
            let o = u64s(&b);
            check_offsets("offsets", &o)?;
            Some(o)
        }
        None => None,
    };
    ck.pass("offsets", "monotone");

    let img = read_bytes(dir, &m.files.nll_img)?;
    let txt = read_bytes(dir, &m.files.nll_txt)?;
    let txt_offsets = offsets_txt.as_deref().unwrap_or(&offsets);
    for i in 0..n {
        let li = offsets[i + 1] - offsets[i];
        let lt = txt_offsets[i + 1] - txt_offsets[i];
        if li != lt {
            return Err(fatal(
                "nll_lengths",
                format!("with-image span has {li} tokens, text-only span has {lt}"),
                Some(i),
            ));
        }
    }
    expect_len("nll_lengths", &m.files.nll_img, img.len(), offsets[n] as usize * 4)?;
    expect_len("nll_lengths", &m.files.nll_txt, txt.len(), txt_offsets[n] as usize * 4)?;
    ck.pass("nll_lengths", format!("{} tokens", offsets[n]));

    let grad = f32s(&grad);
    let sem = f32s(&sem);
    let scalars = f32s(&scalars);
    let img = f32s(&img);
    let txt = f32s(&txt);
    check_finite("grad", &grad, m.d_g, false)?;
    check_finite("sem", &sem, m.d_s, false)?;
    check_finite("scalars", &scalars, 2, true)?;
    if let Some(i) = img.iter().position(|v| !v.is_finite() || *v < 0.0) {
        let s = nll_sample_at(&offsets, i);
        return Err(fatal(
            "finite",
            format!("invalid NLL {} in nll_img at token {}", img[i], i - offsets[s] as usize),
            Some(s),
        ));
    }
    if let Some(i) = txt.iter().position(|v| !v.is_finite() || *v < 0.0) {
        let s = nll_sample_at(txt_offsets, i);
        return Err(fatal(
            "finite",
            format!("invalid NLL {} in nll_txt at token {}", txt[i], i - txt_offsets[s] as usize),
            Some(s),
        ));
    }
    ck.pass("finite", "all values finite, NLL and scalars non-negative");

    let records = ids
        .into_iter()
        .enumerate()
        .map(|(i, sample_id)| {
            let (a, b) = (offsets[i] as usize, offsets[i + 1] as usize);
            let (ta, tb) = (txt_offsets[i] as usize, txt_offsets[i + 1] as usize);
            SampleRecord {
                sample_id,
                dataset_id: m.dataset_id.clone(),
                timestep_added: 0,
                gradient_vec: grad[i * m.d_g..(i + 1) * m.d_g].to_vec(),
                semantic_vec: sem[i * m.d_s..(i + 1) * m.d_s].to_vec(),
                nll_with_image: img[a..b].to_vec(),
                nll_text_only: txt[ta..tb].to_vec(),
                el2n_raw: scalars[2 * i],
                entropy_raw: scalars[2 * i + 1],
            }
        })
        .collect();
    Ok(Bundle {
        dataset_id: m.dataset_id,
        d_g: m.d_g,
        d_s: m.d_s,
        records,
    })
}

fn validate_and_load(dir: &Path) -> (ValidationReport, Option<Bundle>) {
    let mut ck = Checker { checks: Vec::new() };
    match run_checks(dir, &mut ck) {
        Ok(b) => (
            ValidationReport {
                checks: ck.checks,
                failure: None,
            },
            Some(b),
        ),
        Err(f) => {
            ck.fail(&f);
            (
                ValidationReport {
                    checks: ck.checks,
                    failure: Some(f),
                },
                None,
            )
        }
    }
}

/// Check a bundle directory without loading it into a pool. Never writes.
pub fn validate_bundle(dir: &Path) -> ValidationReport {
    validate_and_load(dir).0
}

/// Validate and load a bundle; the first fatal check becomes the error.
pub fn read_bundle(dir: &Path) -> Result<Bundle> {
    match validate_and_load(dir) {
        (_, Some(b)) => Ok(b),
        (report, None) => Err(Error::Validation(
            report.failure.expect("failed validation carries a failure"),
        )),
    }
}

fn write_file(path: PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

/// Write a bundle in canonical form. Records are validated first so a
/// written bundle always passes [`validate_bundle`].
pub fn write_bundle(dir: &Path, bundle: &Bundle) -> Result<()> {
    for r in &bundle.records {
        r.validate(bundle.d_g, bundle.d_s)?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = BundleFiles::default();
    let manifest = BundleManifest {
        version: BUNDLE_VERSION,
        dataset_id: bundle.dataset_id.clone(),
        n_samples: bundle.records.len(),
        d_g: bundle.d_g,
        d_s: bundle.d_s,
        files: files.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_file(dir.join(MANIFEST_FILE), text.as_bytes())?;

    let mut ids = String::new();
    let mut grad = Vec::new();
    let mut sem = Vec::new();
    let mut img = Vec::new();
    let mut txt = Vec::new();
    let mut offsets = Vec::with_capacity((bundle.len() + 1) * 8);
    let mut scalars = Vec::new();
    let mut cursor = 0u64;
    offsets.extend_from_slice(&cursor.to_le_bytes());
    for r in &bundle.records {
        ids.push_str(&serde_json::to_string(&r.sample_id).expect("id serializes"));
        ids.push('\n');
        grad.extend(r.gradient_vec.iter().flat_map(|v| v.to_le_bytes()));
        sem.extend(r.semantic_vec.iter().flat_map(|v| v.to_le_bytes()));
        img.extend(r.nll_with_image.iter().flat_map(|v| v.to_le_bytes()));
        txt.extend(r.nll_text_only.iter().flat_map(|v| v.to_le_bytes()));
        cursor += r.nll_with_image.len() as u64;
        offsets.extend_from_slice(&cursor.to_le_bytes());
        scalars.extend(r.el2n_raw.to_le_bytes());
        scalars.extend(r.entropy_raw.to_le_bytes());
    }
    write_file(dir.join(&files.ids), ids.as_bytes())?;
    write_file(dir.join(&files.grad), &grad)?;
    write_file(dir.join(&files.sem), &sem)?;
    write_file(dir.join(&files.nll_img), &img)?;
    write_file(dir.join(&files.nll_txt), &txt)?;
    write_file(dir.join(&files.offsets), &offsets)?;
    write_file(dir.join(&files.scalars), &scalars)?;
    Ok(())
}

/// File names a canonical bundle consists of, manifest first.
pub fn canonical_files() -> Vec<String> {
    let mut v = vec![MANIFEST_FILE.to_string()];
    v.extend(BundleFiles::default().all().into_iter().map(String::from));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(i: usize) -> SampleRecord {
        let len = 2 + i % 3;
        SampleRecord {
            sample_id: format!("s{i:03}"),
            dataset_id: "unit".into(),
            timestep_added: 0,
            gradient_vec: (0..4).map(|j| (i * 4 + j) as f32 * 0.25).collect(),
            semantic_vec: (0..3).map(|j| 1.0 + (i + j) as f32).collect(),
            nll_with_image: (0..len).map(|j| 0.1 * j as f32).collect(),
            nll_text_only: (0..len).map(|j| 0.2 * j as f32).collect(),
            el2n_raw: 0.3,
            entropy_raw: 1.1,
        }
    }

    fn bundle(n: usize) -> Bundle {
        Bundle {
            dataset_id: "unit".into(),
            d_g: 4,
            d_s: 3,
            records: (0..n).map(sample).collect(),
        }
    }

    #[test]
    fn valid_bundle_passes_and_loads() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &bundle(100)).unwrap();
        let report = validate_bundle(dir.path());
        assert!(report.is_ok(), "{report}");
        assert!(report.checks.iter().all(|c| c.passed));
        assert_eq!(read_bundle(dir.path()).unwrap(), bundle(100));
    }

    #[test]
    fn missing_file_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &bundle(5)).unwrap();
        fs::remove_file(dir.path().join("sem.f32")).unwrap();
        let f = validate_bundle(dir.path()).failure.unwrap();
        assert_eq!(f.check, "files");
        assert!(f.message.contains("sem.f32"));
    }

    #[test]
    fn missing_manifest_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let f = validate_bundle(dir.path()).failure.unwrap();
        assert_eq!(f.check, "manifest");
    }

    #[test]
    fn truncated_gradient_matrix_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &bundle(100)).unwrap();
        let p = dir.path().join("grad.f32");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        let report = validate_bundle(dir.path());
        let f = report.failure.unwrap();
        assert_eq!(f.check, "grad_bytes");
        assert!(matches!(read_bundle(dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn nll_length_mismatch_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &bundle(100)).unwrap();
        // give the text-only stream its own offsets with sample 7 one token
        // longer and sample 8 one token shorter
        let mut offsets = u64s(&fs::read(dir.path().join("offsets.u64")).unwrap());
        offsets[8] += 1;
        let bytes: Vec<u8> = offsets.iter().flat_map(|o| o.to_le_bytes()).collect();
        fs::write(dir.path().join("offsets_txt.u64"), bytes).unwrap();
        let mp = dir.path().join(MANIFEST_FILE);
        let mut m: BundleManifest = serde_json::from_str(&fs::read_to_string(&mp).unwrap()).unwrap();
        m.files.offsets_txt = Some("offsets_txt.u64".into());
        fs::write(&mp, serde_json::to_string(&m).unwrap()).unwrap();

        let f = validate_bundle(dir.path()).failure.unwrap();
        assert_eq!(f.check, "nll_lengths");
        assert_eq!(f.sample, Some(7));
        assert!(f.to_string().contains("sample 7"));
    }

    #[test]
    fn non_finite_value_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &bundle(10)).unwrap();
        let p = dir.path().join("sem.f32");
        let mut bytes = fs::read(&p).unwrap();
        let at = (4 * 3 + 2) * 4; // sample 4, element 2
        bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        let f = validate_bundle(dir.path()).failure.unwrap();
        assert_eq!(f.check, "finite");
        assert_eq!(f.sample, Some(4));
        assert!(f.message.contains("element 2"));
    }

    #[test]
    fn negative_nll_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &bundle(10)).unwrap();
        let p = dir.path().join("nll_txt.f32");
        let mut bytes = fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&(-1.0f32).to_le_bytes());
        fs::write(&p, bytes).unwrap();
        let f = validate_bundle(dir.path()).failure.unwrap();
        assert_eq!(f.sample, Some(9));
    }

    #[test]
    fn non_monotone_offsets_are_fatal() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &bundle(10)).unwrap();
        let p = dir.path().join("offsets.u64");
        let mut offsets = u64s(&fs::read(&p).unwrap());
        offsets.swap(3, 4);
        fs::write(&p, offsets.iter().flat_map(|o| o.to_le_bytes()).collect::<Vec<_>>()).unwrap();
        let f = validate_bundle(dir.path()).failure.unwrap();
        assert_eq!(f.check, "offsets");
    }

    #[test]
    fn duplicate_ids_are_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = bundle(3);
        b.records[2].sample_id = "s000".into();
        // write_bundle only checks per-record invariants
        write_bundle(dir.path(), &b).unwrap();
        let f = validate_bundle(dir.path()).failure.unwrap();
        assert_eq!(f.check, "ids");
        assert_eq!(f.sample, Some(2));
    }

    #[test]
    fn validation_never_mutates() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &bundle(10)).unwrap();
        let before: Vec<_> = canonical_files()
            .iter()
            .map(|f| fs::read(dir.path().join(f)).unwrap())
            .collect();
        let _ = validate_bundle(dir.path());
        let after: Vec<_> = canonical_files()
            .iter()
            .map(|f| fs::read(dir.path().join(f)).unwrap())
            .collect();
        assert_eq!(before, after);
    }
}
