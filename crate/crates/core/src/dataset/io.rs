use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{CorrectionTuple, DatasetConfig, DatasetError, DetectionSample, Thresholds};
use crate::toyworld::{ArtifactSpec, GridConfig, Label, RegionMask, TokenId, ToyImage};

pub const SCHEMA_VERSION: u32 = 1;

pub const TRAIN_DETECT_FILE: &str = "train_detect.jsonl";
pub const TRAIN_CORRECT_FILE: &str = "train_correct.jsonl";
pub const TEST_DETECT_FILE: &str = "test_detect.jsonl";
pub const TEST_CORRECT_FILE: &str = "test_correct.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub schema_version: u32,
    pub index: usize,
    pub image: ToyImage,
    pub label: Label,
    pub answer_text: Vec<TokenId>,
    pub spec: Option<ArtifactSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionRecord {
    pub schema_version: u32,
    pub index: usize,
    pub artifact_image: ToyImage,
    pub diag_text: Vec<TokenId>,
    pub mid_images: Vec<ToyImage>,
    pub correct_image: ToyImage,
    pub stop_text: Vec<TokenId>,
    pub spec: ArtifactSpec,
    pub mask: RegionMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub train_detect: usize,
    pub train_correct: usize,
    pub test_detect: usize,
    pub test_correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub grid: GridConfig,
    pub base_seed: u64,
    pub counts: Counts,
    pub thresholds: Thresholds,
    pub mid_alphas: Vec<f64>,
}

impl Manifest {
    pub fn new(cfg: &DatasetConfig, n_test_correct: usize, thresholds: Thresholds) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            grid: cfg.grid,
            base_seed: cfg.seed,
            counts: Counts {
                train_detect: cfg.n_train,
                train_correct: cfg.n_train,
                test_detect: cfg.n_test,
                test_correct: n_test_correct,
            },
            thresholds,
            mid_alphas: cfg.mid_alphas.clone(),
        }
    }

    pub fn tau_keep(&self) -> f64 {
        self.thresholds.tau_keep
    }
}

pub fn serialize_detection(index: usize, s: &DetectionSample) -> String {
    let rec = DetectionRecord {
        schema_version: SCHEMA_VERSION,
        index,
        image: s.image.clone(),
        label: s.label,
        answer_text: s.answer_text.clone(),
        spec: s.spec,
    };
    serde_json::to_string(&rec).expect("records always serialize")
}

pub fn serialize_correction(index: usize, t: &CorrectionTuple) -> String {
    let rec = CorrectionRecord {
        schema_version: SCHEMA_VERSION,
        index,
        artifact_image: t.artifact_image.clone(),
        diag_text: t.diag_text.clone(),
        mid_images: t.mid_images.clone(),
        correct_image: t.correct_image.clone(),
        stop_text: t.stop_text.clone(),
        spec: t.spec,
        mask: t.mask.clone(),
    };
    serde_json::to_string(&rec).expect("records always serialize")
}

fn parse_line<T: DeserializeOwned>(line: &str, line_no: usize) -> Result<T, DatasetError> {
    let mut de = serde_json::Deserializer::from_str(line);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let mut path = e.path().to_string();
        let message = e.inner().to_string();
        // serde reports a missing field at its parent; name the field itself
        if let Some(rest) = message.strip_prefix("missing field `") {
            if let Some(field) = rest.split('`').next() {
                path = if path == "." {
                    field.to_string()
                } else {
                    format!("{path}.{field}")
                };
            }
        }
        DatasetError::Parse {
            line: line_no,
            path,
            message,
        }
    })
}

fn check_version(v: u32, line: usize) -> Result<(), DatasetError> {
    if v == SCHEMA_VERSION {
        Ok(())
    } else {
        Err(DatasetError::Parse {
            line,
            path: "schema_version".into(),
            message: format!("unsupported schema version {v}"),
        })
    }
}

pub fn parse_detection(line: &str, line_no: usize) -> Result<(usize, DetectionSample), DatasetError> {
    let rec: DetectionRecord = parse_line(line, line_no)?;
    check_version(rec.schema_version, line_no)?;
    Ok((
        rec.index,
        DetectionSample {
            image: rec.image,
            label: rec.label,
            answer_text: rec.answer_text,
            spec: rec.spec,
        },
    ))
}

pub fn parse_correction(line: &str, line_no: usize) -> Result<(usize, CorrectionTuple), DatasetError> {
    let rec: CorrectionRecord = parse_line(line, line_no)?;
    check_version(rec.schema_version, line_no)?;
    Ok((
        rec.index,
        CorrectionTuple {
            artifact_image: rec.artifact_image,
            diag_text: rec.diag_text,
            mid_images: rec.mid_images,
            correct_image: rec.correct_image,
            stop_text: rec.stop_text,
            spec: rec.spec,
            mask: rec.mask,
        },
    ))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_lines<T>(
    path: &Path,
    parse: impl Fn(&str, usize) -> Result<(usize, T), DatasetError>,
) -> Result<Vec<T>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse(l, i + 1).map(|(_, rec)| rec))
        .collect()
}

pub fn read_detection_file(path: &Path) -> Result<Vec<DetectionSample>, DatasetError> {
    read_lines(path, parse_detection)
}

pub fn read_correction_file(path: &Path) -> Result<Vec<CorrectionTuple>, DatasetError> {
    read_lines(path, parse_correction)
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<(), DatasetError> {
    let mut body = String::new();
    for l in lines {
        body.push_str(&l);
        body.push('\n');
    }
    fs::write(path, body).map_err(io_err(path))
}

/// The full dataset: manifest plus four splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train_detect: Vec<DetectionSample>,
    pub train_correct: Vec<CorrectionTuple>,
    pub test_detect: Vec<DetectionSample>,
    pub test_correct: Vec<CorrectionTuple>,
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let det = |v: &[DetectionSample]| {
        v.iter()
            .enumerate()
            .map(|(i, s)| serialize_detection(i, s))
            .collect::<Vec<_>>()
    };
    let cor = |v: &[CorrectionTuple]| {
        v.iter()
            .enumerate()
            .map(|(i, s)| serialize_correction(i, s))
            .collect::<Vec<_>>()
    };
    write_lines(&dir.join(TRAIN_DETECT_FILE), det(&ds.train_detect).into_iter())?;
    write_lines(&dir.join(TRAIN_CORRECT_FILE), cor(&ds.train_correct).into_iter())?;
    write_lines(&dir.join(TEST_DETECT_FILE), det(&ds.test_detect).into_iter())?;
    write_lines(&dir.join(TEST_CORRECT_FILE), cor(&ds.test_correct).into_iter())?;
    let manifest = serde_json::to_string_pretty(&ds.manifest).expect("manifest serializes") + "\n";
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(io_err(&path))
}

impl Dataset {
    pub fn read_manifest(dir: &Path) -> Result<Manifest, DatasetError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: Manifest = parse_line(&text, 1)?;
        check_version(manifest.schema_version, 1)?;
        Ok(manifest)
    }

    /// Load every split, checking each image against the manifest grid.
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let manifest = Self::read_manifest(dir)?;
        let ds = Self {
            train_detect: read_detection_file(&dir.join(TRAIN_DETECT_FILE))?,
            train_correct: read_correction_file(&dir.join(TRAIN_CORRECT_FILE))?,
            test_detect: read_detection_file(&dir.join(TEST_DETECT_FILE))?,
            test_correct: read_correction_file(&dir.join(TEST_CORRECT_FILE))?,
            manifest,
        };
        ds.check_grid()?;
        Ok(ds)
    }

    pub fn check_grid(&self) -> Result<(), DatasetError> {
        let expected = self.manifest.grid;
        let grids = self
            .train_detect
            .iter()
            .chain(&self.test_detect)
            .map(|s| s.image.grid())
            .chain(
                self.train_correct
                    .iter()
                    .chain(&self.test_correct)
                    .flat_map(|t| [t.artifact_image.grid(), t.correct_image.grid()]),
            );
        for found in grids {
            if found != expected {
                return Err(DatasetError::GridMismatch { expected, found });
            }
        }
        Ok(())
    }
}
