use std::fs;
use std::path::Path;

use genshield_core::inference::{CorrectionTrajectory, StructuredDetection, Termination};
use genshield_core::toyworld::{vocab, Label, TokenId, ToyImage};
use serde::Serialize;

use crate::error::CliError;

const PPM_SCALE: usize = 8;

fn words(ids: &[TokenId]) -> String {
    vocab()
        .detokenize(ids)
        .unwrap_or_else(|_| ids.iter().map(|t| t.0.to_string()).collect::<Vec<_>>().join(" "))
}

#[derive(Serialize)]
pub struct Detection {
    pub verdict: Label,
    pub fake_score: f64,
    pub caption: String,
    pub reason: String,
    pub raw: String,
    pub malformed: bool,
}

impl Detection {
    pub fn new(d: &StructuredDetection) -> Self {
        Self {
            verdict: d.verdict,
            fake_score: d.fake_score,
            caption: words(&d.caption),
            reason: words(&d.reason),
            raw: words(&d.raw),
            malformed: d.malformed,
        }
    }
}

#[derive(Serialize)]
pub struct LabeledDetection {
    pub index: usize,
    pub label: Label,
    pub detection: Detection,
}

#[derive(Serialize)]
pub struct RoundOut {
    pub round: usize,
    pub diagnosis: String,
    pub image: ToyImage,
}

#[derive(Serialize)]
pub struct Trajectory {
    pub input: ToyImage,
    pub rounds: Vec<RoundOut>,
    pub terminated_by: Termination,
    pub rounds_used: usize,
}

impl Trajectory {
    pub fn new(t: &CorrectionTrajectory) -> Self {
        Self {
            input: t.input.clone(),
            rounds: t
                .rounds
                .iter()
                .enumerate()
                .map(|(i, r)| RoundOut {
                    round: i + 1,
                    diagnosis: words(&r.diagnosis),
                    image: r.image.clone(),
                })
                .collect(),
            terminated_by: t.terminated_by,
            rounds_used: t.rounds_used,
        }
    }
}

/// Binary PPM, each site drawn as a `PPM_SCALE`-pixel square. Values in
/// `[−1, 1]` map to `[0, 255]`; single-channel images render as grey.
pub fn ppm(image: &ToyImage) -> Vec<u8> {
    let (h, w) = (image.height(), image.width());
    let mut out = format!("P6\n{} {}\n255\n", w * PPM_SCALE, h * PPM_SCALE).into_bytes();
    let byte = |v: f64| (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8;
    for i in 0..h * PPM_SCALE {
        for j in 0..w * PPM_SCALE {
            for c in 0..3 {
                let ch = c.min(image.channels() - 1);
                out.push(byte(image.get(ch, i / PPM_SCALE, j / PPM_SCALE)));
            }
        }
    }
    out
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// `trajectory.json`, `diagnoses.txt`, `input.ppm` and one `round_{k}.ppm`
/// per round.
pub fn write_trajectory(t: &CorrectionTrajectory, dir: &Path) -> Result<(), CliError> {
    let out = Trajectory::new(t);
    write(
        &dir.join("trajectory.json"),
        serde_json::to_string_pretty(&out).expect("serializes") + "\n",
    )?;
    let diag: String = out
        .rounds
        .iter()
        .map(|r| format!("{}\t{}\n", r.round, r.diagnosis))
        .collect();
    write(&dir.join("diagnoses.txt"), diag)?;
    write(&dir.join("input.ppm"), ppm(&t.input))?;
    for r in &out.rounds {
        write(&dir.join(format!("round_{}.ppm", r.round)), ppm(&r.image))?;
    }
    Ok(())
}
